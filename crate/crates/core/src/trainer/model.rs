//! The full network as configured: encoders, optional cross guidance, the
//! fusion head and the discriminators.

use candle_core::{DType, Tensor};

use crate::backbone::{Discriminator, Domain, Encoder, EncoderSpec, FeatureMap, Modality, SegHead, SegOutput};
use crate::ccg::Ccg;
use crate::dataio::TrainConfig;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::sfa::{downsample_attention, select_foreground};
use crate::tensor_ops::resize_bilinear;

pub const HEAD_HIDDEN: usize = 64;
pub const AUX_HIDDEN: usize = 32;

/// Parameter-name prefixes of the segmentation network.
pub const GENERATOR_PREFIXES: &[&str] = &["rgb-encoder.", "sn-encoder.", "ccg.", "head."];
pub const DISCRIMINATOR_PREFIXES: &[&str] = &["disc-rgb.", "disc-sn."];

/// Network inputs for one batch.
#[derive(Debug, Clone)]
pub struct Inputs {
    /// `(B, 3, H, W)` in `[0, 1]`.
    pub rgb: Tensor,
    /// Encoded normals `(B, 3, H, W)`; required when the SN branch is on.
    pub sn: Option<Tensor>,
}

impl Inputs {
    pub fn size(&self) -> Result<(usize, usize)> {
        let (_, _, h, w) = self.rgb.dims4()?;
        Ok((h, w))
    }
}

/// Everything one forward pass produces.
#[derive(Debug, Clone)]
pub struct Forward {
    pub domain: Domain,
    pub main: SegOutput,
    pub aux_rgb: Option<SegOutput>,
    pub aux_sn: Option<SegOutput>,
    /// Cross-guidance foreground maps at feature resolution.
    pub a_rgb: Option<Tensor>,
    pub a_sn: Option<Tensor>,
    /// All four encoder stages per branch, before any gating.
    pub stages_rgb: Vec<FeatureMap>,
    pub stages_sn: Option<Vec<FeatureMap>>,
    pub input_size: (usize, usize),
}

impl Forward {
    /// Main-head foreground probability at input resolution, `(B, 1, H, W)`.
    pub fn foreground_full(&self) -> Result<Tensor> {
        let (h, w) = self.input_size;
        resize_bilinear(&self.main.foreground()?, h, w)
    }

    pub fn stage(&self, modality: Modality, n: usize) -> Result<&FeatureMap> {
        let stages = match modality {
            Modality::Rgb => Some(&self.stages_rgb),
            Modality::Sn => self.stages_sn.as_ref(),
        };
        stages
            .and_then(|s| s.get(n - 1))
            .ok_or_else(|| Error::Config(format!("no {modality} stage {n} in this model")))
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: TrainConfig,
    pub store: ParamStore,
    pub spec: EncoderSpec,
    pub rgb: Encoder,
    pub sn: Option<Encoder>,
    pub ccg: Option<Ccg>,
    pub head: SegHead,
    pub disc_rgb: Option<Discriminator>,
    pub disc_sn: Option<Discriminator>,
}

impl Model {
    pub fn new(config: &TrainConfig, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(config.seed, dtype);
        let spec = EncoderSpec::for_backbone(config.backbone);
        let rgb = Encoder::new(&mut store, "rgb-encoder", &spec)?;
        let sn = if config.sn_enabled {
            Some(Encoder::new(&mut store, "sn-encoder", &spec)?)
        } else {
            None
        };
        let used: Vec<usize> = if spec.multi_scale() { vec![1, 2, 3, 4] } else { vec![4] };
        let finest = spec.stage_channels(used[0]);
        let per_branch: usize = used.iter().map(|&n| spec.stage_channels(n)).sum();
        let ccg = if config.ccg_enabled {
            Some(Ccg::new(&mut store, finest, AUX_HIDDEN, config.ccg_gate_modulated)?)
        } else {
            None
        };
        let branches = if config.sn_enabled { 2 } else { 1 };
        let head = SegHead::new(&mut store, "head", per_branch * branches, HEAD_HIDDEN)?;
        let sfa = &config.sfa;
        let align_c = spec.stage_channels(sfa.stage);
        let disc_rgb = if sfa.enabled && sfa.modalities.includes_rgb() {
            Some(Discriminator::new(&mut store, "disc-rgb", align_c)?)
        } else {
            None
        };
        let disc_sn = if sfa.enabled && sfa.modalities.includes_sn() {
            Some(Discriminator::new(&mut store, "disc-sn", align_c)?)
        } else {
            None
        };
        Ok(Self {
            config: config.clone(),
            store,
            spec,
            rgb,
            sn,
            ccg,
            head,
            disc_rgb,
            disc_sn,
        })
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    /// Rejects image sizes the configured layers cannot process.
    pub fn check_input_size(&self, h: usize, w: usize) -> Result<()> {
        let os = self.spec.output_stride();
        if h % os != 0 || w % os != 0 {
            return Err(Error::Config(format!(
                "image size {h}x{w} must be a multiple of the output stride {os}"
            )));
        }
        if self.config.sfa.enabled {
            let s = self.spec.stage_stride(self.config.sfa.stage);
            if h / s < 16 || w / s < 16 {
                return Err(Error::Config(format!(
                    "sfa.stage {} gives {}x{} features; the discriminator needs at least 16x16",
                    self.config.sfa.stage,
                    h / s,
                    w / s
                )));
            }
        }
        Ok(())
    }

    fn used(&self, stages: &[FeatureMap]) -> Vec<Tensor> {
        if self.spec.multi_scale() {
            stages.iter().map(|f| f.data.clone()).collect()
        } else {
            vec![stages[3].data.clone()]
        }
    }

    pub fn forward(&self, inputs: &Inputs, domain: Domain) -> Result<Forward> {
        let input_size = inputs.size()?;
        let stages_rgb = self.rgb.stages(&inputs.rgb, Modality::Rgb, domain)?;
        let stages_sn = match (&self.sn, &inputs.sn) {
            (Some(enc), Some(x)) => Some(enc.stages(x, Modality::Sn, domain)?),
            (Some(_), None) => return Err(Error::Input("model expects surface normals".into())),
            (None, _) => None,
        };
        let mut rgb = self.used(&stages_rgb);
        let mut sn = stages_sn.as_ref().map(|s| self.used(s));
        let (mut aux_rgb, mut aux_sn, mut a_rgb, mut a_sn) = (None, None, None, None);
        if let (Some(ccg), Some(sn_feats)) = (&self.ccg, &sn) {
            let out = ccg.forward_stages(&rgb, sn_feats)?;
            rgb = out.rgb;
            sn = Some(out.sn);
            aux_rgb = Some(out.aux_rgb);
            aux_sn = Some(out.aux_sn);
            a_rgb = Some(out.a_rgb);
            a_sn = Some(out.a_sn);
        }
        let mut parts = rgb;
        parts.extend(sn.unwrap_or_default());
        let (_, _, fh, fw) = parts[0].dims4()?;
        let parts = parts
            .iter()
            .map(|p| resize_bilinear(p, fh, fw))
            .collect::<Result<Vec<_>>>()?;
        let fused = if parts.len() == 1 { parts[0].clone() } else { Tensor::cat(&parts, 1)? };
        let main = self.head.forward(&fused)?;
        Ok(Forward {
            domain,
            main,
            aux_rgb,
            aux_sn,
            a_rgb,
            a_sn,
            stages_rgb,
            stages_sn,
            input_size,
        })
    }

    pub fn discriminator(&self, modality: Modality) -> Option<&Discriminator> {
        match modality {
            Modality::Rgb => self.disc_rgb.as_ref(),
            Modality::Sn => self.disc_sn.as_ref(),
        }
    }

    /// Aligned modalities in a fixed order.
    pub fn aligned(&self) -> Vec<Modality> {
        [Modality::Rgb, Modality::Sn]
            .into_iter()
            .filter(|&m| self.discriminator(m).is_some())
            .collect()
    }

    /// Foreground-selected stage features of `modality` for the
    /// discriminator. The attention is always a constant; `detach_features`
    /// additionally cuts the encoder out of the graph.
    pub fn selected(&self, fwd: &Forward, modality: Modality, detach_features: bool) -> Result<Tensor> {
        let f = fwd.stage(modality, self.config.sfa.stage)?;
        let (h, w) = f.spatial();
        let a = downsample_attention(&fwd.foreground_full()?.detach(), h, w)?;
        let f = if detach_features { f.with_data(f.data.detach()) } else { f.clone() };
        let allow_sn = self.config.sfa.modalities.includes_sn();
        Ok(select_foreground(&f, &a, allow_sn)?.data)
    }

    /// Per-location target probabilities from the discriminator of `modality`.
    pub fn domain_scores(&self, fwd: &Forward, modality: Modality, detach_features: bool) -> Result<Tensor> {
        let d = self
            .discriminator(modality)
            .ok_or_else(|| Error::Config(format!("no {modality} discriminator configured")))?;
        d.discriminate(&self.selected(fwd, modality, detach_features)?)
    }
}
