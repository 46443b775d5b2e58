use kanconv::gradcheck::{gradient_check, gradient_check_many};
use kanconv::{Tape, Tensor};
use proptest::prelude::*;

fn tensor(shape: &'static [usize]) -> impl Strategy<Value = Tensor> {
    let n: usize = shape.iter().product();
    proptest::collection::vec(-3.0..3.0f64, n).prop_map(move |d| Tensor::new(shape.to_vec(), d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn elementwise_gradients(a in tensor(&[2, 3]), b in tensor(&[2, 3])) {
        let err = gradient_check_many(
            |t, v| {
                let s = t.add(v[0], v[1])?;
                let d = t.sub(s, v[1])?;
                let m = t.mul(d, v[1])?;
                let m = t.scale(m, 0.7);
                let q = t.silu(m);
                Ok(t.mean(q))
            },
            &[a, b],
            1e-5,
        ).unwrap();
        prop_assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn matmul_bias_softmax_gradients(x in tensor(&[3, 4]), w in tensor(&[4, 5]), b in tensor(&[5])) {
        let err = gradient_check_many(
            |t, v| {
                let h = t.matmul(v[0], v[1])?;
                let h = t.add_bias(h, v[2])?;
                let lp = t.log_softmax(h)?;
                t.cross_entropy(lp, &[0, 4, 2])
            },
            &[x, w, b],
            1e-5,
        ).unwrap();
        prop_assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn reshape_and_relu_gradients(x in tensor(&[2, 6])) {
        // Keep every entry away from the ReLU kink.
        let x = x.map(|v| if v.abs() < 0.1 { v + 0.5 } else { v });
        let err = gradient_check(
            |t, v| {
                let r = t.reshape(v, vec![3, 4])?;
                let r = t.relu(r);
                Ok(t.sum(r))
            },
            &x,
            1e-5,
        ).unwrap();
        prop_assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn log_softmax_rows_normalize(x in tensor(&[4, 7])) {
        let mut t = Tape::new();
        let v = t.constant(x.map(|v| 10.0 * v));
        let lp = t.log_softmax(v).unwrap();
        for row in t.value(lp).data().chunks(7) {
            let s: f64 = row.iter().map(|v| v.exp()).sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_is_pure(x in tensor(&[3, 4]), w in tensor(&[4, 2])) {
        let run = || {
            let mut t = Tape::new();
            let a = t.constant(x.clone());
            let b = t.constant(w.clone());
            let h = t.matmul(a, b).unwrap();
            let h = t.silu(h);
            let lp = t.log_softmax(h).unwrap();
            t.value(lp).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        prop_assert_eq!(run(), run());
    }
}

#[test]
fn fan_out_accumulates() {
    let mut t = Tape::new();
    let x = t.param(&Tensor::from_vec(vec![2.0]));
    let y = t.mul(x, x).unwrap();
    let z = t.add(y, x).unwrap();
    t.backward(z).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[5.0]);
}
