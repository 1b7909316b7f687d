//! Cross guidance between the RGB and surface-normal branches.
//!
//! Each branch pools its features into a channel gate for the other branch,
//! and each branch's auxiliary head produces a foreground map that gates the
//! other branch's features spatially.

use candle_core::Tensor;

use crate::backbone::{FeatureMap, SegHead, SegOutput};
use crate::error::{Error, Result};
use crate::params::{Init, ParamStore};
use crate::tensor_ops::downsample_area;

/// Global context: `sigmoid(W · mean_hw(F))`, shape `(B, C)`.
pub fn gce(f: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (_, c, _, _) = f.dims4()?;
    if w.dims() != [c, c] {
        return Err(Error::Config(format!(
            "context projection {:?} does not match {c} channels",
            w.dims()
        )));
    }
    let pooled = f.mean((2, 3))?;
    Ok(candle_nn::ops::sigmoid(&pooled.matmul(&w.t()?)?)?)
}

/// Channel-wise product `F[b, c, h, w] · gc[b, c]`.
pub fn modulate(f: &Tensor, gc: &Tensor) -> Result<Tensor> {
    let (b, c, _, _) = f.dims4()?;
    if gc.dims() != [b, c] {
        return Err(Error::Config(format!(
            "context of shape {:?} cannot gate features {:?}",
            gc.dims(),
            f.dims()
        )));
    }
    Ok(f.broadcast_mul(&gc.reshape((b, c, 1, 1))?)?)
}

/// Runs the auxiliary head and returns its foreground probability
/// `(B, 1, H, W)` with the full head output.
pub fn foreground_attention(f: &Tensor, head: &SegHead) -> Result<(Tensor, SegOutput)> {
    let out = head.forward(f)?;
    Ok((out.foreground()?, out))
}

/// Spatial gate `F[b, c, h, w] · A[b, 0, h, w]`.
pub fn cross_gate(f: &Tensor, a: &Tensor) -> Result<Tensor> {
    let (b, _, h, w) = f.dims4()?;
    if a.dims() != [b, 1, h, w] {
        return Err(Error::Config(format!(
            "attention {:?} does not match features {:?}",
            a.dims(),
            f.dims()
        )));
    }
    Ok(f.broadcast_mul(a)?)
}

/// Parameters of the cross-guidance module.
#[derive(Debug, Clone)]
pub struct Ccg {
    /// Projection applied to SN features; gates the RGB branch.
    pub gce_rgb2sn: Tensor,
    /// Projection applied to RGB features; gates the SN branch.
    pub gce_sn2rgb: Tensor,
    pub aux_rgb: SegHead,
    pub aux_sn: SegHead,
    /// Gate the context-modulated features instead of the raw ones.
    pub gate_modulated: bool,
}

#[derive(Debug, Clone)]
pub struct CcgOutput {
    /// Gated RGB features, one per stage.
    pub rgb: Vec<Tensor>,
    pub sn: Vec<Tensor>,
    pub aux_rgb: SegOutput,
    pub aux_sn: SegOutput,
    /// Foreground map from the RGB auxiliary head (gates SN).
    pub a_rgb: Tensor,
    /// Foreground map from the SN auxiliary head (gates RGB).
    pub a_sn: Tensor,
}

impl Ccg {
    pub fn new(store: &mut ParamStore, channels: usize, hidden: usize, gate_modulated: bool) -> Result<Self> {
        Ok(Self {
            gce_rgb2sn: store.get("ccg.gce_rgb2sn.weight", &[channels, channels], Init::FanIn(channels))?,
            gce_sn2rgb: store.get("ccg.gce_sn2rgb.weight", &[channels, channels], Init::FanIn(channels))?,
            aux_rgb: SegHead::new(store, "ccg.aux_rgb", channels, hidden)?,
            aux_sn: SegHead::new(store, "ccg.aux_sn", channels, hidden)?,
            gate_modulated,
        })
    }

    /// The module with the roles of the two branches exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            gce_rgb2sn: self.gce_sn2rgb.clone(),
            gce_sn2rgb: self.gce_rgb2sn.clone(),
            aux_rgb: self.aux_sn.clone(),
            aux_sn: self.aux_rgb.clone(),
            gate_modulated: self.gate_modulated,
        }
    }

    /// Single-stage forward pass.
    pub fn forward(&self, f_rgb: &Tensor, f_sn: &Tensor) -> Result<CcgOutput> {
        self.forward_stages(&[f_rgb.clone()], &[f_sn.clone()])
    }

    /// Forward pass over stage lists (finest first). Context and attention
    /// come from the finest stage; coarser stages are gated with the
    /// area-downsampled attention.
    pub fn forward_stages(&self, rgb: &[Tensor], sn: &[Tensor]) -> Result<CcgOutput> {
        let (f_rgb, f_sn) = match (rgb.first(), sn.first()) {
            (Some(r), Some(s)) => (r, s),
            _ => return Err(Error::Config("cross guidance needs at least one stage".into())),
        };
        if rgb.len() != sn.len() || f_rgb.dims() != f_sn.dims() {
            return Err(Error::Config(format!(
                "branch features differ: {:?} vs {:?}",
                f_rgb.dims(),
                f_sn.dims()
            )));
        }
        // RGB -> SN
        let gc_sn = gce(f_sn, &self.gce_rgb2sn)?;
        let rgb_mod = modulate(f_rgb, &gc_sn)?;
        let (a_rgb, aux_rgb) = foreground_attention(&rgb_mod, &self.aux_rgb)?;
        // SN -> RGB
        let gc_rgb = gce(f_rgb, &self.gce_sn2rgb)?;
        let sn_mod = modulate(f_sn, &gc_rgb)?;
        let (a_sn, aux_sn) = foreground_attention(&sn_mod, &self.aux_sn)?;

        let gate_all = |stages: &[Tensor], finest_mod: &Tensor, a: &Tensor| -> Result<Vec<Tensor>> {
            stages
                .iter()
                .enumerate()
                .map(|(i, f)| {
                    let (_, _, h, w) = f.dims4()?;
                    let base = if i == 0 && self.gate_modulated { finest_mod } else { f };
                    cross_gate(base, &downsample_area(a, h, w)?)
                })
                .collect()
        };
        Ok(CcgOutput {
            rgb: gate_all(rgb, &rgb_mod, &a_sn)?,
            sn: gate_all(sn, &sn_mod, &a_rgb)?,
            aux_rgb,
            aux_sn,
            a_rgb,
            a_sn,
        })
    }
}

/// Convenience wrapper over [`Ccg::forward`] for tagged feature maps.
pub fn ccg_forward(ccg: &Ccg, f_rgb: &FeatureMap, f_sn: &FeatureMap) -> Result<(FeatureMap, FeatureMap, SegOutput, SegOutput)> {
    let out = ccg.forward(&f_rgb.data, &f_sn.data)?;
    let mut rgb = out.rgb;
    let mut sn = out.sn;
    Ok((
        f_rgb.with_data(rgb.remove(0)),
        f_sn.with_data(sn.remove(0)),
        out.aux_rgb,
        out.aux_sn,
    ))
}
