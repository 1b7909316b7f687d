//! Segmentation loss, pseudo-label thresholding and the round-dependent
//! weighted total.

use candle_core::{DType, Device, Tensor};
use ndarray::Array2;
use serde::Serialize;

use crate::dataio::pseudo::PseudoLabelRecord;
use crate::dataio::LossWeights;
use crate::error::{Error, Result};
use crate::tensor_ops::scalar;

/// Per-pixel targets for a batch: labels and a keep mask, both
/// `(B, 1, H, W)` in the compute dtype.
#[derive(Debug, Clone)]
pub struct PixelTargets {
    pub labels: Tensor,
    pub keep: Tensor,
}

impl PixelTargets {
    /// Builds targets from {0, 1} label maps and optional ignore masks.
    pub fn new(labels: &[&Array2<u8>], ignore: Option<&[&Array2<bool>]>, dtype: DType, device: &Device) -> Result<Self> {
        let first = labels
            .first()
            .ok_or_else(|| Error::Input("empty label batch".into()))?;
        let (h, w) = first.dim();
        let mut y = Vec::with_capacity(labels.len() * h * w);
        let mut keep = Vec::with_capacity(labels.len() * h * w);
        for (i, l) in labels.iter().enumerate() {
            if l.dim() != (h, w) {
                return Err(Error::Input(format!("label {i} has shape {:?}, expected {:?}", l.dim(), (h, w))));
            }
            if let Some(v) = l.iter().find(|&&v| v > 1) {
                return Err(Error::Input(format!("label value {v} outside {{0, 1}}")));
            }
            y.extend(l.iter().map(|&v| f64::from(v)));
            match ignore {
                Some(ig) => {
                    let m = ig[i];
                    if m.dim() != (h, w) {
                        return Err(Error::Input("ignore mask does not match its label".into()));
                    }
                    keep.extend(m.iter().map(|&x| if x { 0.0 } else { 1.0 }));
                }
                None => keep.extend(std::iter::repeat_n(1.0, h * w)),
            }
        }
        let shape = (labels.len(), 1, h, w);
        Ok(Self {
            labels: Tensor::from_vec(y, shape, device)?.to_dtype(dtype)?,
            keep: Tensor::from_vec(keep, shape, device)?.to_dtype(dtype)?,
        })
    }

    /// Rows `idx` of the batch axis.
    pub fn select(&self, idx: &Tensor) -> Result<Self> {
        Ok(Self {
            labels: self.labels.index_select(idx, 0)?,
            keep: self.keep.index_select(idx, 0)?,
        })
    }
}

/// Mean two-class cross-entropy over kept pixels; zero (with a connected
/// graph) when every pixel is ignored.
pub fn seg_loss(logits: &Tensor, targets: &PixelTargets) -> Result<Tensor> {
    let (b, c, h, w) = logits.dims4()?;
    if c != 2 || targets.labels.dims() != [b, 1, h, w] {
        return Err(Error::Input(format!(
            "logits {:?} do not match targets {:?}",
            logits.dims(),
            targets.labels.dims()
        )));
    }
    let logp = candle_nn::ops::log_softmax(logits, 1)?;
    let lp0 = logp.narrow(1, 0, 1)?;
    let lp1 = logp.narrow(1, 1, 1)?;
    let y = &targets.labels;
    let picked = ((lp1 * y)? + (lp0 * y.affine(-1.0, 1.0)?)?)?;
    let kept = (picked * &targets.keep)?.sum_all()?;
    let count = scalar(&targets.keep.sum_all()?)?;
    if count == 0.0 {
        return Ok(kept.affine(0.0, 0.0)?);
    }
    Ok(kept.affine(-1.0 / count, 0.0)?)
}

/// Splits a foreground probability map at `alpha`: foreground where
/// `p >= alpha`, background where `p <= 1 - alpha`, ignored in between.
pub fn pseudo_label_masks(p1: &Array2<f32>, alpha: f64) -> (Array2<u8>, Array2<bool>) {
    let lo = 1.0 - alpha;
    let label = p1.mapv(|p| u8::from(f64::from(p) >= alpha));
    let ignore = p1.mapv(|p| {
        let p = f64::from(p);
        p > lo && p < alpha
    });
    (label, ignore)
}

pub fn make_pseudo_labels(id: &str, p1: &Array2<f32>, alpha: f64, producer_round: usize) -> PseudoLabelRecord {
    let (label, ignore) = pseudo_label_masks(p1, alpha);
    PseudoLabelRecord {
        id: id.to_string(),
        label,
        ignore,
        producer_round,
        alpha,
    }
}

/// Loss components of one step; `None` marks a term that is not part of
/// the current configuration or round.
#[derive(Debug, Clone)]
pub struct LossTerms<T> {
    pub rgb_seg_s: Option<T>,
    pub sn_seg_s: Option<T>,
    pub seg_s: Option<T>,
    pub rgb_seg_t: Option<T>,
    pub sn_seg_t: Option<T>,
    pub seg_t: Option<T>,
    pub adv: Option<T>,
}

impl<T> Default for LossTerms<T> {
    fn default() -> Self {
        Self {
            rgb_seg_s: None,
            sn_seg_s: None,
            seg_s: None,
            rgb_seg_t: None,
            sn_seg_t: None,
            seg_t: None,
            adv: None,
        }
    }
}

/// Values that can be weighted and summed.
pub trait LossValue: Sized + Clone {
    fn scaled(&self, w: f64) -> Result<Self>;
    fn plus(&self, other: &Self) -> Result<Self>;
}

impl LossValue for f64 {
    fn scaled(&self, w: f64) -> Result<Self> {
        Ok(self * w)
    }

    fn plus(&self, other: &Self) -> Result<Self> {
        Ok(self + other)
    }
}

impl LossValue for Tensor {
    fn scaled(&self, w: f64) -> Result<Self> {
        Ok(self.affine(w, 0.0)?)
    }

    fn plus(&self, other: &Self) -> Result<Self> {
        Ok((self + other)?)
    }
}

impl<T: LossValue> LossTerms<T> {
    fn weighted(&self, w: &LossWeights) -> [(Option<&T>, f64); 7] {
        [
            (self.rgb_seg_s.as_ref(), w.rgb_seg_s),
            (self.sn_seg_s.as_ref(), w.sn_seg_s),
            (self.seg_s.as_ref(), w.seg_s),
            (self.rgb_seg_t.as_ref(), w.rgb_seg_t),
            (self.sn_seg_t.as_ref(), w.sn_seg_t),
            (self.seg_t.as_ref(), w.seg_t),
            (self.adv.as_ref(), w.adv),
        ]
    }

    fn has_target_terms(&self) -> bool {
        self.rgb_seg_t.is_some() || self.sn_seg_t.is_some() || self.seg_t.is_some()
    }
}

/// The weighted total for `round`: source terms and the adversarial term
/// always, target terms from round 2 on.
pub fn total_loss<T: LossValue>(round: usize, terms: &LossTerms<T>, w: &LossWeights) -> Result<T> {
    if round == 0 {
        return Err(Error::State("rounds are numbered from 1".into()));
    }
    if round == 1 && terms.has_target_terms() {
        return Err(Error::State("round 1 has no target segmentation terms".into()));
    }
    if round >= 2 && terms.seg_t.is_none() {
        return Err(Error::State(format!(
            "round {round} needs pseudo labels from round {}",
            round - 1
        )));
    }
    let mut total: Option<T> = None;
    for (term, weight) in terms.weighted(w) {
        if let Some(t) = term {
            let x = t.scaled(weight)?;
            total = Some(match total {
                Some(acc) => acc.plus(&x)?,
                None => x,
            });
        }
    }
    total.ok_or_else(|| Error::State("no loss terms".into()))
}

/// Scalar record of one step's losses.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LossBreakdown {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rgb_seg_s: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sn_seg_s: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seg_s: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rgb_seg_t: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sn_seg_t: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seg_t: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adv: Option<f64>,
    /// Discriminator objective (the quantity it maximizes).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub disc: Option<f64>,
    pub total: f64,
}

impl LossBreakdown {
    pub fn from_terms(round: usize, terms: &LossTerms<f64>, w: &LossWeights) -> Result<Self> {
        Ok(Self {
            rgb_seg_s: terms.rgb_seg_s,
            sn_seg_s: terms.sn_seg_s,
            seg_s: terms.seg_s,
            rgb_seg_t: terms.rgb_seg_t,
            sn_seg_t: terms.sn_seg_t,
            seg_t: terms.seg_t,
            adv: terms.adv,
            disc: None,
            total: total_loss(round, terms, w)?,
        })
    }

    pub fn is_finite(&self) -> bool {
        [
            self.rgb_seg_s,
            self.sn_seg_s,
            self.seg_s,
            self.rgb_seg_t,
            self.sn_seg_t,
            self.seg_t,
            self.adv,
            self.disc,
        ]
        .iter()
        .flatten()
        .all(|v| v.is_finite())
            && self.total.is_finite()
    }

    /// Running mean over steps.
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len().max(1) as f64;
        let avg = |f: fn(&LossBreakdown) -> Option<f64>| {
            let v: Vec<f64> = items.iter().filter_map(f).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        LossBreakdown {
            rgb_seg_s: avg(|b| b.rgb_seg_s),
            sn_seg_s: avg(|b| b.sn_seg_s),
            seg_s: avg(|b| b.seg_s),
            rgb_seg_t: avg(|b| b.rgb_seg_t),
            sn_seg_t: avg(|b| b.sn_seg_t),
            seg_t: avg(|b| b.seg_t),
            adv: avg(|b| b.adv),
            disc: avg(|b| b.disc),
            total: items.iter().map(|b| b.total).sum::<f64>() / n,
        }
    }
}

impl LossTerms<Tensor> {
    pub fn values(&self) -> Result<LossTerms<f64>> {
        let v = |t: &Option<Tensor>| t.as_ref().map(scalar).transpose();
        Ok(LossTerms {
            rgb_seg_s: v(&self.rgb_seg_s)?,
            sn_seg_s: v(&self.sn_seg_s)?,
            seg_s: v(&self.seg_s)?,
            rgb_seg_t: v(&self.rgb_seg_t)?,
            sn_seg_t: v(&self.sn_seg_t)?,
            seg_t: v(&self.seg_t)?,
            adv: v(&self.adv)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    fn logits_for(p1: &[f64]) -> Tensor {
        // logits (0, logit(p)) give softmax foreground p
        let mut v = vec![0.0; p1.len()];
        v.extend(p1.iter().map(|p| (p / (1.0 - p)).ln()));
        Tensor::from_vec(v, (1, 2, 1, p1.len()), &Device::Cpu).unwrap()
    }

    #[test]
    fn seg_loss_values() {
        let t = PixelTargets::new(&[&arr2(&[[1u8, 1]])], None, DType::F64, &Device::Cpu).unwrap();
        let l = scalar(&seg_loss(&logits_for(&[0.9, 0.2]), &t).unwrap()).unwrap();
        assert!((l - (-(0.9f64.ln() + 0.2f64.ln()) / 2.0)).abs() < 1e-12);
        let u = scalar(&seg_loss(&logits_for(&[0.5, 0.5]), &t).unwrap()).unwrap();
        assert!((u - 2f64.ln()).abs() < 1e-12);

        let all = arr2(&[[true, true]]);
        let ti = PixelTargets::new(&[&arr2(&[[1u8, 0]])], Some(&[&all]), DType::F64, &Device::Cpu).unwrap();
        assert_eq!(scalar(&seg_loss(&logits_for(&[0.3, 0.6]), &ti).unwrap()).unwrap(), 0.0);

        assert!(PixelTargets::new(&[&arr2(&[[2u8]])], None, DType::F64, &Device::Cpu).is_err());
    }

    #[test]
    fn pseudo_label_rules() {
        let p = arr2(&[[0.995f32, 0.6, 0.005]]);
        let (l, i) = pseudo_label_masks(&p, 0.99);
        assert_eq!(l, arr2(&[[1, 0, 0]]));
        assert_eq!(i, arr2(&[[false, true, false]]));
        let (_, i) = pseudo_label_masks(&arr2(&[[0.5f32, 0.2, 0.7]]), 0.5);
        assert!(i.iter().all(|&x| !x));
    }

    #[test]
    fn totals_by_round() {
        let w = LossWeights::default();
        let ones = |target: bool| LossTerms {
            rgb_seg_s: Some(1.0),
            sn_seg_s: Some(1.0),
            seg_s: Some(1.0),
            rgb_seg_t: target.then_some(1.0),
            sn_seg_t: target.then_some(1.0),
            seg_t: target.then_some(1.0),
            adv: Some(1.0),
        };
        assert!((total_loss(1, &ones(false), &w).unwrap() - 2.0001).abs() < 1e-12);
        assert!((total_loss(2, &ones(true), &w).unwrap() - 2.9001).abs() < 1e-12);
        assert!(matches!(total_loss(2, &ones(false), &w), Err(Error::State(_))));
        assert!(matches!(total_loss(1, &ones(true), &w), Err(Error::State(_))));
    }
}
