//! Hard pseudo labels and cross-projection agreement masks.

use crate::error::{invalid, mismatch, Result};
use crate::tensor::Tensor;

/// Per-pixel class ids in `0..k`, with `k` reserved as the ignore id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PseudoLabel {
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub data: Vec<u16>,
}

impl PseudoLabel {
    pub fn new(h: usize, w: usize, k: usize, data: Vec<u16>) -> Result<Self> {
        if data.len() != h * w {
            return Err(mismatch("pseudo label", &[h, w], &[data.len()]));
        }
        if let Some(&bad) = data.iter().find(|&&l| l as usize > k) {
            return Err(invalid(format!("label {bad} exceeds ignore id {k}")));
        }
        Ok(Self { h, w, k, data })
    }

    pub fn ignore_id(&self) -> u16 {
        self.k as u16
    }

    /// `(k, h, w)` one-hot view; ignored pixels are all-zero columns.
    pub fn onehot(&self) -> Tensor {
        let plane = self.h * self.w;
        let mut t = Tensor::zeros(&[self.k, self.h, self.w]);
        for (p, &l) in self.data.iter().enumerate() {
            if (l as usize) < self.k {
                t.data_mut()[l as usize * plane + p] = 1.0;
            }
        }
        t
    }

    /// Fraction of pixels that are not ignored.
    pub fn valid_fraction(&self) -> f64 {
        let n = self.data.iter().filter(|&&l| (l as usize) < self.k).count();
        n as f64 / self.data.len().max(1) as f64
    }

    /// Labels as a `(1, h, w)` real tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, self.h, self.w], self.data.iter().map(|&l| l as f32).collect())
            .expect("label length matches its shape")
    }
}

/// Per-pixel argmax over the leading class axis of `(K, H, W)` logits; ties
/// go to the lowest class.
pub fn argmax_onehot(logits: &Tensor) -> Result<PseudoLabel> {
    if logits.rank() != 3 {
        return Err(invalid(format!("logits must be (K, H, W), got {:?}", logits.shape())));
    }
    let (k, h, w) = (logits.dim(0), logits.dim(1), logits.dim(2));
    if k < 2 {
        return Err(invalid(format!("argmax needs at least two classes, got {k}")));
    }
    let plane = h * w;
    let d = logits.data();
    let data = (0..plane)
        .map(|p| {
            let mut best = 0;
            for c in 1..k {
                if d[c * plane + p] > d[best * plane + p] {
                    best = c;
                }
            }
            best as u16
        })
        .collect();
    PseudoLabel::new(h, w, k, data)
}

/// Complementary confident/uncertain pixel sets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfidenceMasks {
    pub h: usize,
    pub w: usize,
    pub confident: Vec<bool>,
    pub uncertain: Vec<bool>,
}

impl ConfidenceMasks {
    pub fn from_confident(h: usize, w: usize, confident: Vec<bool>) -> Result<Self> {
        if confident.len() != h * w {
            return Err(mismatch("confidence mask", &[h, w], &[confident.len()]));
        }
        let uncertain = confident.iter().map(|c| !c).collect();
        let m = Self { h, w, confident, uncertain };
        m.assert_partition();
        Ok(m)
    }

    fn assert_partition(&self) {
        assert!(
            self.confident.iter().zip(&self.uncertain).all(|(c, u)| c ^ u),
            "confidence masks must partition the pixel set"
        );
    }

    pub fn confident_fraction(&self) -> f64 {
        self.confident.iter().filter(|&&c| c).count() as f64 / self.confident.len().max(1) as f64
    }

    /// `(1, h, w)` map, 1 for confident pixels.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![1, self.h, self.w],
            self.confident.iter().map(|&c| if c { 1.0 } else { 0.0 }).collect(),
        )
        .expect("mask length matches its shape")
    }
}

/// Confident where all three label maps agree on the class.
pub fn assess_confidence(
    label_erp: &PseudoLabel,
    label_ffp: &PseudoLabel,
    label_tp: &PseudoLabel,
) -> Result<ConfidenceMasks> {
    for other in [label_ffp, label_tp] {
        if (other.h, other.w) != (label_erp.h, label_erp.w) {
            return Err(mismatch(
                "assess_confidence",
                &[label_erp.h, label_erp.w],
                &[other.h, other.w],
            ));
        }
    }
    let confident = label_erp
        .data
        .iter()
        .zip(&label_ffp.data)
        .zip(&label_tp.data)
        .map(|((a, b), c)| a == b && b == c)
        .collect();
    ConfidenceMasks::from_confident(label_erp.h, label_erp.w, confident)
}

/// Splits a label map into its confident and uncertain parts; pixels outside
/// each part carry the ignore id.
pub fn masked_labels(label: &PseudoLabel, masks: &ConfidenceMasks) -> Result<(PseudoLabel, PseudoLabel)> {
    if (label.h, label.w) != (masks.h, masks.w) {
        return Err(mismatch("masked_labels", &[label.h, label.w], &[masks.h, masks.w]));
    }
    masks.assert_partition();
    let ignore = label.ignore_id();
    let pick = |mask: &[bool]| -> Vec<u16> {
        label
            .data
            .iter()
            .zip(mask)
            .map(|(&l, &m)| if m { l } else { ignore })
            .collect()
    };
    Ok((
        PseudoLabel::new(label.h, label.w, label.k, pick(&masks.confident))?,
        PseudoLabel::new(label.h, label.w, label.k, pick(&masks.uncertain))?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logits(k: usize, values: &[f32]) -> Tensor {
        Tensor::new(vec![k, 1, values.len() / k], values.to_vec()).unwrap()
    }

    #[test]
    fn argmax_examples() {
        assert_eq!(argmax_onehot(&logits(3, &[0.1, 0.7, 0.2])).unwrap().data, vec![1]);
        assert_eq!(argmax_onehot(&logits(2, &[0.5, 0.5])).unwrap().data, vec![0]);
        assert!(argmax_onehot(&logits(1, &[0.5])).is_err());
    }

    #[test]
    fn onehot_rows_sum_to_one() {
        let l = PseudoLabel::new(1, 3, 3, vec![0, 2, 1]).unwrap();
        let oh = l.onehot();
        for p in 0..3 {
            let s: f32 = (0..3).map(|c| oh.data()[c * 3 + p]).sum();
            assert_eq!(s, 1.0);
        }
    }

    #[test]
    fn disagreement_is_uncertain() {
        let a = PseudoLabel::new(1, 2, 8, vec![2, 1]).unwrap();
        let b = PseudoLabel::new(1, 2, 8, vec![2, 1]).unwrap();
        let c = PseudoLabel::new(1, 2, 8, vec![5, 1]).unwrap();
        let m = assess_confidence(&a, &b, &c).unwrap();
        assert_eq!(m.confident, vec![false, true]);
        assert_eq!(m.uncertain, vec![true, false]);
        let wrong = PseudoLabel::new(2, 1, 8, vec![0, 0]).unwrap();
        assert!(assess_confidence(&a, &b, &wrong).is_err());
    }

    #[test]
    fn masked_label_extremes() {
        let l = PseudoLabel::new(2, 2, 4, vec![0, 1, 2, 3]).unwrap();
        let all = ConfidenceMasks::from_confident(2, 2, vec![true; 4]).unwrap();
        let (c, u) = masked_labels(&l, &all).unwrap();
        assert_eq!(c.data, l.data);
        assert!(u.data.iter().all(|&v| v == 4));
        let none = ConfidenceMasks::from_confident(2, 2, vec![false; 4]).unwrap();
        let (c, _) = masked_labels(&l, &none).unwrap();
        assert!(c.data.iter().all(|&v| v == 4));
    }
}
