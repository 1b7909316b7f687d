//! Attention-selected feature alignment across domains.
//!
//! Encoder features are weighted by the main head's foreground probability
//! so that the discriminator mostly sees road regions. By default only RGB
//! features are aligned; surface normals are already close across domains.

use candle_core::Tensor;

use crate::backbone::{Domain, FeatureMap, Modality};
use crate::error::{Error, Result};
use crate::tensor_ops::downsample_area;

/// Scores are clamped to `[EPS, 1 - EPS]` before taking logs.
pub const EPS: f64 = 1e-7;

/// Area-average downsampling of a `(B, 1, H, W)` attention map.
pub fn downsample_attention(a: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (_, _, ah, aw) = a.dims4()?;
    if h > ah || w > aw {
        return Err(Error::Config(format!(
            "cannot downsample attention {ah}x{aw} to the larger {h}x{w}"
        )));
    }
    downsample_area(a, h, w)
}

/// Foreground-weighted features handed to a discriminator.
#[derive(Debug, Clone)]
pub struct SelectedFeature {
    pub data: Tensor,
    pub modality: Modality,
    pub domain: Domain,
    pub stage: usize,
}

/// `F ⊙ A_n`, broadcast over channels. Surface-normal features are refused
/// unless `allow_sn` is set.
pub fn select_foreground(f: &FeatureMap, a_n: &Tensor, allow_sn: bool) -> Result<SelectedFeature> {
    if f.modality == Modality::Sn && !allow_sn {
        return Err(Error::Contract(
            "surface-normal features are not aligned unless explicitly enabled".into(),
        ));
    }
    let (b, _, h, w) = f.data.dims4()?;
    if a_n.dims() != [b, 1, h, w] {
        return Err(Error::Config(format!(
            "attention {:?} does not match features {:?}",
            a_n.dims(),
            f.data.dims()
        )));
    }
    Ok(SelectedFeature {
        data: f.data.broadcast_mul(a_n)?,
        modality: f.modality,
        domain: f.domain,
        stage: f.stage,
    })
}

fn reduce(t: &Tensor, sum: bool) -> Result<Tensor> {
    Ok(if sum { t.sum_all()? } else { t.mean_all()? })
}

fn clamped_log(p: &Tensor, complement: bool) -> Result<Tensor> {
    let nan = p.ne(p)?.to_dtype(candle_core::DType::F64)?.sum_all()?.to_scalar::<f64>()?;
    if nan > 0.0 {
        return Err(Error::Numeric("discriminator score is NaN".into()));
    }
    let p = p.clamp(EPS, 1.0 - EPS)?;
    let q = if complement { p.affine(-1.0, 1.0)? } else { p };
    Ok(q.log()?)
}

/// `Σ log D_T + Σ log(1 − D_S)`, or the per-location mean of each term when
/// `sum` is false. The discriminator maximizes this.
pub fn adversarial_objective(d_s: &Tensor, d_t: &Tensor, sum: bool) -> Result<Tensor> {
    let t = reduce(&clamped_log(d_t, false)?, sum)?;
    let s = reduce(&clamped_log(d_s, true)?, sum)?;
    Ok((t + s)?)
}

/// `−Σ log(1 − D_T)` (or its mean): small when target features pass as source.
pub fn generator_fool_loss(d_t: &Tensor, sum: bool) -> Result<Tensor> {
    Ok(reduce(&clamped_log(d_t, true)?, sum)?.neg()?)
}
