//! Classification metrics from a confusion matrix.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Accuracy plus support-weighted and macro precision, recall and F1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    /// `confusion[true][predicted]`
    pub confusion: Vec<Vec<u64>>,
}

pub fn compute_metrics(predictions: &[usize], labels: &[usize], classes: usize) -> Result<Metrics> {
    if predictions.is_empty() {
        return Err(Error::Contract("metrics of an empty prediction set".into()));
    }
    if predictions.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let mut confusion = vec![vec![0u64; classes]; classes];
    for (&p, &l) in predictions.iter().zip(labels) {
        if p >= classes || l >= classes {
            return Err(Error::Data(format!("class id {} outside [0, {classes})", p.max(l))));
        }
        confusion[l][p] += 1;
    }
    let n = predictions.len() as f64;
    let (mut wp, mut wr, mut wf) = (0.0, 0.0, 0.0);
    let (mut mp, mut mr, mut mf) = (0.0, 0.0, 0.0);
    let mut correct = 0;
    for c in 0..classes {
        let tp = confusion[c][c];
        correct += tp;
        let support: u64 = confusion[c].iter().sum();
        let predicted: u64 = confusion.iter().map(|row| row[c]).sum();
        let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let p = ratio(tp, predicted);
        let r = ratio(tp, support);
        let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        let w = support as f64 / n;
        wp += w * p;
        wr += w * r;
        wf += w * f;
        mp += p;
        mr += r;
        mf += f;
    }
    let k = classes as f64;
    Ok(Metrics {
        accuracy: correct as f64 / n,
        precision: wp,
        recall: wr,
        f1: wf,
        macro_precision: mp / k,
        macro_recall: mr / k,
        macro_f1: mf / k,
        confusion,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        let y = [0, 1, 2, 2, 1];
        let m = compute_metrics(&y, &y, 3).unwrap();
        assert_eq!((m.accuracy, m.precision, m.recall, m.f1), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn binary_example() {
        let m = compute_metrics(&[1, 1, 0, 0], &[1, 0, 0, 0], 2).unwrap();
        assert_eq!(m.accuracy, 0.75);
        assert!((m.precision - 0.875).abs() < 1e-15);
        assert!((m.recall - 0.75).abs() < 1e-15);
        assert_eq!(m.confusion, vec![vec![2, 1], vec![0, 1]]);
    }

    #[test]
    fn never_predicted_class_is_zero_not_nan() {
        let m = compute_metrics(&[0, 0, 0], &[0, 1, 2], 3).unwrap();
        for v in [m.precision, m.recall, m.f1, m.macro_precision, m.macro_f1] {
            assert!(v.is_finite());
        }
        assert!((m.precision - 1.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn rejects_empty_and_mismatched() {
        assert!(matches!(compute_metrics(&[], &[], 2), Err(Error::Contract(_))));
        assert!(compute_metrics(&[0], &[0, 1], 2).is_err());
        assert!(compute_metrics(&[3], &[0], 2).is_err());
    }
}
