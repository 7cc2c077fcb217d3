//! Confusion matrix and intersection-over-union.

use log::debug;
use serde::Serialize;

use crate::error::{invalid, mismatch, Error, Result};
use crate::pseudo::PseudoLabel;

/// Rows are ground truth, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    pub k: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        Self { k, counts: vec![0; k * k] }
    }

    pub fn at(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.k + pred]
    }

    /// Accumulates one prediction; truth pixels carrying an id `>= k` are
    /// skipped.
    pub fn add(&mut self, pred: &[u16], truth: &[u16]) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(mismatch("confusion", &[pred.len()], &[truth.len()]));
        }
        for (&p, &t) in pred.iter().zip(truth) {
            let (p, t) = (p as usize, t as usize);
            if t >= self.k {
                continue;
            }
            if p >= self.k {
                return Err(invalid(format!("predicted class {p} outside 0..{}", self.k)));
            }
            self.counts[t * self.k + p] += 1;
        }
        Ok(())
    }

    pub fn add_labels(&mut self, pred: &PseudoLabel, truth: &PseudoLabel) -> Result<()> {
        self.add(&pred.data, &truth.data)
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.k != self.k {
            return Err(mismatch("confusion merge", &[self.k], &[other.k]));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }
}

/// Per-class IoU (None where the union is empty) and the mean over classes
/// with a nonempty union.
pub fn miou(cm: &ConfusionMatrix) -> Result<(Vec<Option<f64>>, f64)> {
    if cm.k < 2 {
        return Err(invalid("mIoU needs at least two classes"));
    }
    if cm.total() == 0 {
        return Err(Error::EmptyReduction("miou"));
    }
    let k = cm.k;
    let ious: Vec<Option<f64>> = (0..k)
        .map(|c| {
            let tp = cm.at(c, c);
            let fn_: u64 = (0..k).filter(|&p| p != c).map(|p| cm.at(c, p)).sum();
            let fp: u64 = (0..k).filter(|&t| t != c).map(|t| cm.at(t, c)).sum();
            let union = tp + fp + fn_;
            (union > 0).then(|| tp as f64 / union as f64)
        })
        .collect();
    let valid: Vec<f64> = ious.iter().flatten().copied().collect();
    let skipped = k - valid.len();
    if skipped > 0 {
        debug!("mIoU excludes {skipped} class(es) with empty union");
    }
    Ok((ious, valid.iter().sum::<f64>() / valid.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_and_disjoint() {
        let mut cm = ConfusionMatrix::new(3);
        cm.add(&[0, 1, 2, 2], &[0, 1, 2, 2]).unwrap();
        assert_eq!(miou(&cm).unwrap().1, 1.0);
        let mut cm = ConfusionMatrix::new(2);
        cm.add(&[1, 1], &[0, 0]).unwrap();
        assert_eq!(miou(&cm).unwrap().1, 0.0);
    }

    #[test]
    fn hand_evaluated_two_class() {
        // TP=(3,1), FP=(1,3), FN=(3,1)
        let mut cm = ConfusionMatrix::new(2);
        cm.counts = vec![3, 3, 1, 1];
        let (ious, m) = miou(&cm).unwrap();
        assert!((ious[0].unwrap() - 3.0 / 7.0).abs() < 1e-12);
        assert!((ious[1].unwrap() - 1.0 / 5.0).abs() < 1e-12);
        assert!((m - 0.3143).abs() < 1e-4);
    }

    #[test]
    fn ignore_and_empty() {
        let mut cm = ConfusionMatrix::new(2);
        cm.add(&[0, 1], &[2, 2]).unwrap();
        assert_eq!(cm.total(), 0);
        assert!(miou(&cm).is_err());
    }
}
