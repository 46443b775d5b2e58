//! Cross-entropy and the activation regularizer.

use crate::autodiff::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

/// Weights of the regularizer `λ(μ1·Σ|Φ|₁ + μ2·Σ S(Φ))`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossConfig {
    pub lambda: f64,
    pub mu1: f64,
    pub mu2: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.0,
            mu1: 1.0,
            mu2: 1.0,
        }
    }
}

impl Tape {
    /// Mean over the batch of `−log_probs[b, labels[b]]`.
    pub fn cross_entropy(&mut self, log_probs: Var, labels: &[usize]) -> Result<Var> {
        let lp = self.value(log_probs);
        if lp.ndim() != 2 || lp.shape()[0] != labels.len() {
            return Err(Error::Shape(format!(
                "cross entropy of {:?} log-probabilities with {} labels",
                lp.shape(),
                labels.len()
            )));
        }
        let classes = lp.shape()[1];
        if let Some(i) = labels.iter().position(|&l| l >= classes) {
            return Err(Error::Data(format!(
                "label {} at batch index {i} outside [0, {classes})",
                labels[i]
            )));
        }
        let total: f64 = labels
            .iter()
            .enumerate()
            .map(|(b, &l)| -lp.data()[b * classes + l])
            .sum();
        let out = Tensor::scalar(total / labels.len() as f64);
        Ok(self.push(
            Box::new(NllOp {
                labels: labels.to_vec(),
                classes,
            }),
            &[log_probs],
            out,
        ))
    }

    /// `S = −Σ p ln p` with `p = a / Σa`, for non-negative `a`; zero when
    /// every entry is zero.
    pub fn entropy(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(entropy(self.value(a).data()));
        self.push(Box::new(EntropyOp), &[a], out)
    }
}

/// Entropy of the distribution proportional to `a`, with `0·ln 0 = 0`.
pub fn entropy(a: &[f64]) -> f64 {
    let total: f64 = a.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    -a.iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| {
            let p = v / total;
            p * p.ln()
        })
        .sum::<f64>()
}

struct NllOp {
    labels: Vec<usize>,
    classes: usize,
}

impl Op for NllOp {
    fn name(&self) -> &'static str {
        "cross_entropy"
    }

    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let scale = -g[0] / self.labels.len() as f64;
        let mut gx = vec![0.0; self.labels.len() * self.classes];
        for (b, &l) in self.labels.iter().enumerate() {
            gx[b * self.classes + l] = scale;
        }
        vec![Some(gx)]
    }
}

struct EntropyOp;

impl Op for EntropyOp {
    fn name(&self) -> &'static str {
        "entropy"
    }

    fn backward(&self, inputs: &[&Tensor], out: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let a = inputs[0].data();
        let total: f64 = a.iter().sum();
        if total <= 0.0 {
            return vec![Some(vec![0.0; a.len()])];
        }
        let s = out.data()[0];
        // dS/da_i = −(ln p_i + S) / Σa; zero entries take the one-sided limit 0.
        vec![Some(
            a.iter()
                .map(|&v| {
                    if v > 0.0 {
                        -g[0] * ((v / total).ln() + s) / total
                    } else {
                        0.0
                    }
                })
                .collect(),
        )]
    }
}

/// Training objective for one forward pass. With `λ = 0` this is the
/// cross-entropy node itself and no regularization work is done.
pub fn objective(
    tape: &mut Tape,
    model: &Model,
    x: Var,
    outputs: &[Var],
    bindings: &[Vec<Var>],
    labels: &[usize],
    cfg: &LossConfig,
) -> Result<Var> {
    let last = *outputs
        .last()
        .ok_or_else(|| Error::Contract("model has no layers".into()))?;
    let ce = tape.cross_entropy(last, labels)?;
    if cfg.lambda == 0.0 {
        return Ok(ce);
    }
    let mut total = ce;
    for a in model.activation_l1(tape, x, outputs, bindings)? {
        let l1 = tape.sum(a);
        let s = tape.entropy(a);
        let l1 = tape.scale(l1, cfg.lambda * cfg.mu1);
        let s = tape.scale(s, cfg.lambda * cfg.mu2);
        total = tape.add(total, l1)?;
        total = tape.add(total, s)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::gradient_check;

    #[test]
    fn cross_entropy_examples() {
        let mut t = Tape::new();
        let lp = t.constant(Tensor::from_rows(&[vec![0.0, -40.0]]).unwrap());
        let l = t.cross_entropy(lp, &[0]).unwrap();
        assert_eq!(t.value(l).item().unwrap(), 0.0);

        let u = -(10f64).ln();
        let lp = t.constant(Tensor::from_rows(&[vec![u; 10], vec![u; 10]]).unwrap());
        let l = t.cross_entropy(lp, &[3, 9]).unwrap();
        assert!((t.value(l).item().unwrap() - 10f64.ln()).abs() < 1e-12);

        let lp = t.constant(Tensor::from_rows(&[vec![-0.1, -5.0], vec![-3.0, -2.0]]).unwrap());
        let l = t.cross_entropy(lp, &[0, 1]).unwrap();
        assert!((t.value(l).item().unwrap() - 1.05).abs() < 1e-15);

        assert!(matches!(t.cross_entropy(lp, &[0, 2]), Err(Error::Data(_))));
        assert!(t.cross_entropy(lp, &[0]).is_err());
    }

    #[test]
    fn cross_entropy_gradient() {
        let x = Tensor::from_rows(&[vec![0.3, -1.2, 2.0], vec![1.1, 0.4, -0.7]]).unwrap();
        let err = gradient_check(
            |t, v| {
                let lp = t.log_softmax(v)?;
                t.cross_entropy(lp, &[2, 0])
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn entropy_values() {
        assert_eq!(entropy(&[0.0; 4]), 0.0);
        assert!((entropy(&[0.3; 4]) - 4f64.ln()).abs() < 1e-12);
        assert_eq!(entropy(&[0.0, 2.0, 0.0]), 0.0);
    }

    #[test]
    fn entropy_gradient() {
        let a = Tensor::from_vec(vec![0.2, 1.3, 0.7, 0.05]);
        let err = gradient_check(|t, v| Ok(t.entropy(v)), &a, 1e-6).unwrap();
        assert!(err < 1e-6, "{err}");
    }
}
