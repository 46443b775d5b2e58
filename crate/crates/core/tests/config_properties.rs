use kanconv::config::ModelConfig;
use kanconv::weights;
use kanconv::Tensor;
use proptest::prelude::*;

fn fragment() -> impl Strategy<Value = String> {
    let n = || {
        prop_oneof![
            Just("0".to_string()),
            (1usize..40).prop_map(|v| v.to_string()),
            Just("x".to_string())
        ]
    };
    prop_oneof![
        Just("name = m".to_string()),
        Just("name =".to_string()),
        (n(), n(), n()).prop_map(|(a, b, c)| format!("input = {a} {b} {c}")),
        n().prop_map(|v| format!("input = {v}")),
        n().prop_map(|v| format!("grid_size = {v}")),
        n().prop_map(|v| format!("spline_degree = {v}")),
        (-3.0..3.0f64, -3.0..3.0f64).prop_map(|(a, b)| format!("grid_range = {a} {b}")),
        (n(), n(), n()).prop_map(|(a, b, k)| format!("layer = kan_conv in={a} out={b} kernel={k}")),
        (n(), n(), n(), n()).prop_map(|(a, b, k, p)| format!("layer = conv in={a} out={b} kernel={k} padding={p}")),
        (n(), n()).prop_map(|(a, b)| format!("layer = kan_linear in={a} out={b}")),
        (n(), n()).prop_map(|(a, b)| format!("layer = linear in={a} out={b}")),
        n().prop_map(|w| format!("layer = maxpool window={w}")),
        n().prop_map(|c| format!("layer = batchnorm channels={c}")),
        Just("layer = relu".to_string()),
        Just("layer = flatten".to_string()),
        Just("layer = log_softmax".to_string()),
        Just("layer = mystery".to_string()),
        Just("# comment".to_string()),
        "[a-z =]{0,12}",
    ]
}

/// Random small architectures that always chain correctly.
fn valid_config() -> impl Strategy<Value = String> {
    (
        1usize..3,
        1usize..4,
        2usize..8,
        1usize..4,
        any::<bool>(),
        any::<bool>(),
        4usize..9,
    )
        .prop_map(|(cin, c1, g, k, kan_head, bn, side)| {
            let flat = c1 * side * side;
            let conv = if k == 1 { "conv" } else { "kan_conv" };
            let mut text = format!(
                "name = r\ninput = {cin} {side} {side}\ngrid_size = {g}\nspline_degree = {k}\n\
                 layer = {conv} in={cin} out={c1} kernel=3 padding=1\n"
            );
            if bn {
                text += &format!("layer = batchnorm channels={c1}\n");
            }
            text += "layer = flatten\n";
            text += &format!(
                "layer = {} in={flat} out=3\n",
                if kan_head { "kan_linear" } else { "linear" }
            );
            text + "layer = log_softmax\n"
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn parse_and_build_never_panic(lines in proptest::collection::vec(fragment(), 0..12), seed in any::<u64>()) {
        let text = lines.join("\n");
        if let Ok(cfg) = ModelConfig::parse(&text) {
            // A configuration that validates must also build.
            let model = cfg.build(seed);
            prop_assert!(model.is_ok(), "{text}\n{:?}", model.err());
        }
    }

    #[test]
    fn truncated_blobs_are_rejected(text in valid_config(), cut in 0.0..1.0f64) {
        let model = ModelConfig::parse(&text).unwrap().build(1).unwrap();
        let bytes = weights::to_bytes(&model);
        let end = (cut * bytes.len() as f64) as usize;
        prop_assert!(weights::from_bytes(&bytes[..end]).is_err());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn weight_blobs_round_trip(text in valid_config(), seed in any::<u64>()) {
        let model = ModelConfig::parse(&text).unwrap().build(seed).unwrap();
        let bytes = weights::to_bytes(&model);
        let back = weights::from_bytes(&bytes).unwrap();
        prop_assert_eq!(weights::to_bytes(&back), bytes);
        let x = Tensor::full(&[2, model.input_shape[0], model.input_shape[1], model.input_shape[2]], 0.4);
        let (p, q) = (model.predict(&x).unwrap(), back.predict(&x).unwrap());
        prop_assert!(p.data().iter().zip(q.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
