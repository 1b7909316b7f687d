//! Encoders, segmentation heads and the domain discriminator.

use std::fmt;

use candle_core::{DType, Tensor};
use candle_nn::{GroupNorm, Module};

use crate::dataio::BackboneId;
use crate::error::{Error, Result};
use crate::params::{Init, ParamStore};
use crate::tensor_ops::conv2d;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Modality {
    Rgb,
    Sn,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Rgb => "rgb",
            Modality::Sn => "sn",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Domain {
    Source,
    Target,
}

/// A batch of activations `(B, C, H', W')` with its provenance.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub data: Tensor,
    pub modality: Modality,
    pub domain: Domain,
    /// 1-based encoder stage.
    pub stage: usize,
}

impl FeatureMap {
    pub fn channels(&self) -> usize {
        self.data.dims()[1]
    }

    pub fn spatial(&self) -> (usize, usize) {
        let d = self.data.dims();
        (d[2], d[3])
    }

    pub fn with_data(&self, data: Tensor) -> Self {
        Self { data, ..self.clone() }
    }
}

/// Convolution with weights `(CO, CI, K, K)` and optional bias.
#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        init: Init,
        bias: bool,
    ) -> Result<Self> {
        let weight = store.get(&format!("{name}.weight"), &[cout, cin, k, k], init)?;
        let bias = if bias {
            Some(store.get(&format!("{name}.bias"), &[cout], Init::Zeros)?)
        } else {
            None
        };
        Ok(Self { weight, bias, stride, pad })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv2d(x, &self.weight, self.bias.as_ref(), self.stride, self.pad)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderSpec {
    pub backbone: BackboneId,
    pub widths: [usize; 4],
    pub strides: [usize; 4],
    /// Width of the channel-reduced final stage.
    pub reduced: usize,
    pub groups: usize,
}

impl EncoderSpec {
    pub fn for_backbone(backbone: BackboneId) -> Self {
        Self {
            backbone,
            widths: [16, 32, 64, 128],
            strides: [2, 2, 2, 1],
            reduced: 64,
            groups: 4,
        }
    }

    pub fn output_stride(&self) -> usize {
        self.strides.iter().product()
    }

    /// Channels of stage `n` (1-based); the last stage is the reduced one.
    pub fn stage_channels(&self, n: usize) -> usize {
        if n == 4 {
            self.reduced
        } else {
            self.widths[n - 1]
        }
    }

    /// Stride of stage `n` relative to the input.
    pub fn stage_stride(&self, n: usize) -> usize {
        self.strides[..n].iter().product()
    }

    pub fn multi_scale(&self) -> bool {
        self.backbone == BackboneId::SmallCnnMs
    }
}

#[derive(Debug, Clone)]
struct ConvBlock {
    conv: Conv,
    norm: GroupNorm,
}

/// Four 3x3 conv blocks (conv, group norm, ReLU) and a 1x1 reduction.
#[derive(Debug, Clone)]
pub struct Encoder {
    spec: EncoderSpec,
    blocks: Vec<ConvBlock>,
    reduce: Conv,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, prefix: &str, spec: &EncoderSpec) -> Result<Self> {
        let mut blocks = Vec::with_capacity(4);
        let mut cin = 3;
        for (i, (&w, &s)) in spec.widths.iter().zip(&spec.strides).enumerate() {
            let name = format!("{prefix}.block{}", i + 1);
            let conv = Conv::new(store, &format!("{name}.conv"), cin, w, 3, s, 1, Init::FanIn(cin * 9), false)?;
            let gamma = store.get(&format!("{name}.norm.weight"), &[w], Init::Ones)?;
            let beta = store.get(&format!("{name}.norm.bias"), &[w], Init::Zeros)?;
            let norm = GroupNorm::new(gamma, beta, w, spec.groups, 1e-5)?;
            blocks.push(ConvBlock { conv, norm });
            cin = w;
        }
        let reduce = Conv::new(
            store,
            &format!("{prefix}.reduce"),
            cin,
            spec.reduced,
            1,
            1,
            0,
            Init::FanIn(cin),
            true,
        )?;
        Ok(Self {
            spec: spec.clone(),
            blocks,
            reduce,
        })
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    /// All four stages, finest first. Stage 4 is the channel-reduced output.
    pub fn stages(&self, image: &Tensor, modality: Modality, domain: Domain) -> Result<Vec<FeatureMap>> {
        check_finite(image, "encoder input")?;
        let mut x = image.clone();
        let mut out = Vec::with_capacity(4);
        for (i, b) in self.blocks.iter().enumerate() {
            x = b.norm.forward(&b.conv.forward(&x)?)?.relu()?;
            let data = if i == 3 { self.reduce.forward(&x)? } else { x.clone() };
            out.push(FeatureMap {
                data,
                modality,
                domain,
                stage: i + 1,
            });
        }
        Ok(out)
    }

    /// The feature maps a model consumes: the final stage for single-scale
    /// backbones, every stage (finest first) for multi-scale ones.
    pub fn encode(&self, image: &Tensor, modality: Modality, domain: Domain) -> Result<Vec<FeatureMap>> {
        let mut stages = self.stages(image, modality, domain)?;
        if self.spec.multi_scale() {
            Ok(stages)
        } else {
            Ok(vec![stages.pop().expect("four stages")])
        }
    }
}

/// Errors with [`Error::Input`] if `t` holds a NaN or infinity.
pub fn check_finite(t: &Tensor, what: &str) -> Result<()> {
    let s = t.to_dtype(DType::F64)?.abs()?.sum_all()?.to_scalar::<f64>()?;
    if s.is_finite() {
        Ok(())
    } else {
        Err(Error::Input(format!("{what} contains non-finite values")))
    }
}

/// Two-channel segmentation result.
#[derive(Debug, Clone)]
pub struct SegOutput {
    /// `(B, 2, H', W')`
    pub logits: Tensor,
    pub probs: Tensor,
}

impl SegOutput {
    pub fn from_logits(logits: Tensor) -> Result<Self> {
        let probs = candle_nn::ops::softmax(&logits, 1)?;
        Ok(Self { logits, probs })
    }

    /// Foreground probability `(B, 1, H', W')`.
    pub fn foreground(&self) -> Result<Tensor> {
        Ok(self.probs.narrow(1, 1, 1)?)
    }
}

/// Two 1x1 convolutions with a ReLU in between.
#[derive(Debug, Clone)]
pub struct SegHead {
    hidden: Conv,
    out: Conv,
}

impl SegHead {
    pub fn new(store: &mut ParamStore, prefix: &str, cin: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            hidden: Conv::new(store, &format!("{prefix}.hidden"), cin, hidden, 1, 1, 0, Init::FanIn(cin), true)?,
            out: Conv::new(store, &format!("{prefix}.out"), hidden, 2, 1, 1, 0, Init::FanIn(hidden), true)?,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.hidden.in_channels()
    }

    pub fn forward(&self, features: &Tensor) -> Result<SegOutput> {
        let c = features.dims()[1];
        if c != self.in_channels() {
            return Err(Error::Config(format!(
                "segmentation head expects {} channels, got {c}",
                self.in_channels()
            )));
        }
        let h = self.hidden.forward(features)?.relu()?;
        SegOutput::from_logits(self.out.forward(&h)?)
    }
}

pub const LEAKY_SLOPE: f64 = 0.2;
pub const DISC_WIDTHS: [usize; 4] = [64, 128, 256, 512];

/// Fully convolutional domain classifier: four stride-2 4x4 convolutions
/// with LeakyReLU, then a 3x3 convolution to one channel and a sigmoid.
/// Scores are the probability of the target domain.
#[derive(Debug, Clone)]
pub struct Discriminator {
    layers: Vec<Conv>,
    classifier: Conv,
}

impl Discriminator {
    pub fn new(store: &mut ParamStore, prefix: &str, cin: usize) -> Result<Self> {
        let mut layers = Vec::with_capacity(4);
        let mut c = cin;
        for (i, &w) in DISC_WIDTHS.iter().enumerate() {
            layers.push(Conv::new(store, &format!("{prefix}.conv{}", i + 1), c, w, 4, 2, 1, Init::Normal(0.02), true)?);
            c = w;
        }
        let classifier = Conv::new(store, &format!("{prefix}.classifier"), c, 1, 3, 1, 1, Init::Normal(0.02), true)?;
        Ok(Self { layers, classifier })
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        if h < 16 || w < 16 {
            return Err(Error::Config(format!(
                "discriminator input {h}x{w} is below the minimum 16x16"
            )));
        }
        let mut x = x.clone();
        for l in &self.layers {
            x = candle_nn::ops::leaky_relu(&l.forward(&x)?, LEAKY_SLOPE)?;
        }
        self.classifier.forward(&x)
    }

    /// Per-location target-domain probability `(B, 1, H/16, W/16)`.
    pub fn discriminate(&self, x: &Tensor) -> Result<Tensor> {
        Ok(candle_nn::ops::sigmoid(&self.logits(x)?)?)
    }
}
