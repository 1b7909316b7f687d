//! Pixel-count metrics, threshold sweeps and prediction overlays.
//!
//! Dataset-level scores are computed from summed counts, never by averaging
//! per-image scores.

use std::ops::{Add, AddAssign};

use ndarray::{Array2, Array3, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

impl Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

fn check_binary(a: &Array2<u8>, what: &str) -> Result<()> {
    match a.iter().find(|&&v| v > 1) {
        Some(v) => Err(Error::Input(format!("{what} holds value {v}, expected 0 or 1"))),
        None => Ok(()),
    }
}

/// Counts over pixels where `valid` is set (all pixels if `None`).
pub fn confusion(pred: &Array2<u8>, gt: &Array2<u8>, valid: Option<&Array2<bool>>) -> Result<ConfusionCounts> {
    if pred.dim() != gt.dim() || valid.is_some_and(|v| v.dim() != gt.dim()) {
        return Err(Error::Input(format!(
            "shape mismatch: prediction {:?}, ground truth {:?}",
            pred.dim(),
            gt.dim()
        )));
    }
    check_binary(pred, "prediction")?;
    check_binary(gt, "ground truth")?;
    let mut c = ConfusionCounts::default();
    let mut count = |p: u8, g: u8| match (p, g) {
        (1, 1) => c.tp += 1,
        (1, 0) => c.fp += 1,
        (0, 1) => c.fn_ += 1,
        _ => c.tn += 1,
    };
    match valid {
        Some(v) => Zip::from(pred).and(gt).and(v).for_each(|&p, &g, &ok| {
            if ok {
                count(p, g)
            }
        }),
        None => Zip::from(pred).and(gt).for_each(|&p, &g| count(p, g)),
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    #[serde(rename = "PRE")]
    pub precision: f64,
    #[serde(rename = "REC")]
    pub recall: f64,
    #[serde(rename = "F1")]
    pub f1: f64,
    #[serde(rename = "IoU")]
    pub iou: f64,
    /// Set when some ratio had a zero denominator and was reported as 0.
    pub degenerate: bool,
}

pub fn scores(c: &ConfusionCounts) -> Scores {
    let mut degenerate = false;
    let mut ratio = |num: u64, den: u64| {
        if den == 0 {
            degenerate = true;
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let iou = ratio(c.tp, c.tp + c.fp + c.fn_);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        degenerate = true;
        0.0
    };
    Scores {
        precision,
        recall,
        f1,
        iou,
        degenerate,
    }
}

/// `1` where `p >= t`.
pub fn binarize(p: &Array2<f32>, t: f64) -> Array2<u8> {
    p.mapv(|v| u8::from(f64::from(v) >= t))
}

/// The 255 thresholds `i / 256`, `i = 1..=255`.
pub fn default_thresholds() -> Vec<f64> {
    (1..=255).map(|i| f64::from(i) / 256.0).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaxF {
    #[serde(rename = "MaxF")]
    pub value: f64,
    pub threshold: f64,
}

/// Confusion counts at every threshold of a sweep, accumulated over images.
#[derive(Debug, Clone)]
pub struct ThresholdSweep {
    thresholds: Vec<f64>,
    counts: Vec<ConfusionCounts>,
}

impl ThresholdSweep {
    pub fn new(thresholds: Vec<f64>) -> Result<Self> {
        if thresholds.is_empty() || thresholds.iter().any(|&t| !(t > 0.0 && t < 1.0)) {
            return Err(Error::Input("thresholds must be a non-empty subset of (0, 1)".into()));
        }
        let counts = vec![ConfusionCounts::default(); thresholds.len()];
        Ok(Self { thresholds, counts })
    }

    pub fn add(&mut self, p: &Array2<f32>, gt: &Array2<u8>, valid: Option<&Array2<bool>>) -> Result<()> {
        for (t, c) in self.thresholds.iter().zip(&mut self.counts) {
            *c += confusion(&binarize(p, *t), gt, valid)?;
        }
        Ok(())
    }

    /// Best F1 over the sweep; ties keep the lowest threshold.
    pub fn best(&self) -> MaxF {
        let mut best = MaxF {
            value: f64::NEG_INFINITY,
            threshold: self.thresholds[0],
        };
        for (t, c) in self.thresholds.iter().zip(&self.counts) {
            let f = scores(c).f1;
            if f > best.value {
                best = MaxF { value: f, threshold: *t };
            }
        }
        best
    }
}

pub fn maxf(p: &Array2<f32>, gt: &Array2<u8>, valid: Option<&Array2<bool>>, thresholds: &[f64]) -> Result<MaxF> {
    let mut sweep = ThresholdSweep::new(thresholds.to_vec())?;
    sweep.add(p, gt, valid)?;
    Ok(sweep.best())
}

pub const TP_COLOR: [f32; 3] = [0.0, 1.0, 0.0];
pub const FN_COLOR: [f32; 3] = [0.0, 0.0, 1.0];
pub const FP_COLOR: [f32; 3] = [1.0, 0.0, 0.0];
pub const OVERLAY_ALPHA: f32 = 0.5;

/// Tints true positives green, false negatives blue and false positives
/// red over a `3 x H x W` image; true negatives are left untouched.
pub fn overlay(pred: &Array2<u8>, gt: &Array2<u8>, rgb: &Array3<f32>) -> Result<Array3<f32>> {
    let (_, h, w) = rgb.dim();
    if pred.dim() != (h, w) || gt.dim() != (h, w) {
        return Err(Error::Input(format!(
            "overlay shapes differ: image {h}x{w}, prediction {:?}, ground truth {:?}",
            pred.dim(),
            gt.dim()
        )));
    }
    let mut out = rgb.clone();
    for ((r, c), &p) in pred.indexed_iter() {
        let tint = match (p != 0, gt[[r, c]] != 0) {
            (true, true) => TP_COLOR,
            (false, true) => FN_COLOR,
            (true, false) => FP_COLOR,
            (false, false) => continue,
        };
        for ch in 0..3 {
            out[[ch, r, c]] = (1.0 - OVERLAY_ALPHA) * rgb[[ch, r, c]] + OVERLAY_ALPHA * tint[ch];
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn hand_counted_confusion() {
        let c = confusion(&arr2(&[[1, 1], [0, 0]]), &arr2(&[[1, 0], [0, 1]]), None).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 1, fp: 1, fn_: 1, tn: 1 });
        let s = scores(&c);
        assert_eq!((s.precision, s.recall, s.f1), (0.5, 0.5, 0.5));
        assert!((s.iou - 1.0 / 3.0).abs() < 1e-15);
        assert!(!s.degenerate);
    }

    #[test]
    fn degenerate_and_perfect_cases() {
        let gt = arr2(&[[1u8, 0], [0, 1]]);
        let s = scores(&confusion(&gt, &gt, None).unwrap());
        assert_eq!((s.precision, s.recall, s.f1, s.iou), (1.0, 1.0, 1.0, 1.0));
        let inv = gt.mapv(|v| 1 - v);
        let c = confusion(&inv, &gt, None).unwrap();
        assert_eq!((c.tp, c.tn), (0, 0));
        let s = scores(&c);
        assert_eq!((s.precision, s.recall, s.f1, s.iou), (0.0, 0.0, 0.0, 0.0));
        assert!(s.degenerate);
        assert!(confusion(&arr2(&[[2u8]]), &arr2(&[[1u8]]), None).is_err());
    }

    #[test]
    fn valid_mask_restricts_counts() {
        let valid = arr2(&[[true, false], [false, false]]);
        let c = confusion(&arr2(&[[1, 1], [1, 1]]), &arr2(&[[1, 0], [0, 0]]), Some(&valid)).unwrap();
        assert_eq!(c.total(), 1);
        assert_eq!(c.tp, 1);
    }

    #[test]
    fn maxf_sweeps() {
        let p = arr2(&[[0.4f32, 0.9]]);
        let gt = arr2(&[[1u8, 1]]);
        let m = maxf(&p, &gt, None, &[0.3, 0.5]).unwrap();
        assert_eq!(m, MaxF { value: 1.0, threshold: 0.3 });
        let single = maxf(&p, &gt, None, &[0.5]).unwrap();
        assert_eq!(single.value, scores(&confusion(&binarize(&p, 0.5), &gt, None).unwrap()).f1);
        let hard = gt.mapv(f32::from);
        assert_eq!(maxf(&hard, &gt, None, &default_thresholds()).unwrap().value, 1.0);
        assert!(maxf(&p, &gt, None, &[]).is_err());
        assert_eq!(default_thresholds().len(), 255);
    }

    #[test]
    fn overlay_tints() {
        let rgb = Array3::from_elem((3, 2, 2), 0.4f32);
        let zeros = Array2::<u8>::zeros((2, 2));
        assert_eq!(overlay(&zeros, &zeros, &rgb).unwrap(), rgb);
        let ones = Array2::<u8>::ones((2, 2));
        let g = overlay(&ones, &ones, &rgb).unwrap();
        assert!(g.index_axis(ndarray::Axis(0), 1).iter().all(|&v| (v - 0.7).abs() < 1e-6));
        let mut pred = zeros.clone();
        pred[[1, 0]] = 1;
        let o = overlay(&pred, &zeros, &rgb).unwrap();
        let changed: Vec<_> = (0..2)
            .flat_map(|r| (0..2).map(move |c| (r, c)))
            .filter(|&(r, c)| (0..3).any(|ch| o[[ch, r, c]] != rgb[[ch, r, c]]))
            .collect();
        assert_eq!(changed, vec![(1, 0)]);
        assert!((o[[0, 1, 0]] - 0.7).abs() < 1e-6);
    }
}
