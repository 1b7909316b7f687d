//! Run configuration.
//!
//! The on-disk format is a flat JSON object with dotted keys, e.g.
//! `{"trainer.rounds": 1, "sfa.modalities": "rgb"}`. Absent keys take their
//! defaults and unknown keys are rejected. The same keys are accepted as
//! `key=value` overrides.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde_json::{Map, Value};

use crate::error::{Error, Result};

/// Loss weights of the round-dependent total objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    /// RGB auxiliary head, source domain.
    pub rgb_seg_s: f64,
    /// SN auxiliary head, source domain.
    pub sn_seg_s: f64,
    /// Main head, source domain.
    pub seg_s: f64,
    pub rgb_seg_t: f64,
    pub sn_seg_t: f64,
    pub seg_t: f64,
    /// Adversarial term.
    pub adv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            rgb_seg_s: 0.5,
            sn_seg_s: 0.5,
            seg_s: 1.0,
            rgb_seg_t: 0.2,
            sn_seg_t: 0.2,
            seg_t: 0.5,
            adv: LAMBDA_ADV_SINGLE_SCALE,
        }
    }
}

/// Adversarial weight for single-final-stage backbones.
pub const LAMBDA_ADV_SINGLE_SCALE: f64 = 1e-4;
/// Adversarial weight for multi-scale backbones.
pub const LAMBDA_ADV_MULTI_SCALE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackboneId {
    /// Four conv blocks, one retained output stage.
    SmallCnn,
    /// Same blocks, three stages exposed for multi-scale fusion.
    SmallCnnMs,
}

impl BackboneId {
    pub fn as_str(self) -> &'static str {
        match self {
            BackboneId::SmallCnn => "small-cnn",
            BackboneId::SmallCnnMs => "small-cnn-ms",
        }
    }

    pub fn default_adv_weight(self) -> f64 {
        match self {
            BackboneId::SmallCnn => LAMBDA_ADV_SINGLE_SCALE,
            BackboneId::SmallCnnMs => LAMBDA_ADV_MULTI_SCALE,
        }
    }
}

impl FromStr for BackboneId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "small-cnn" => Ok(BackboneId::SmallCnn),
            "small-cnn-ms" => Ok(BackboneId::SmallCnnMs),
            other => Err(Error::Config(format!("unknown backbone '{other}'"))),
        }
    }
}

/// Which encoder features the discriminators see.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlignModalities {
    Rgb,
    Sn,
    Both,
}

impl AlignModalities {
    pub fn as_str(self) -> &'static str {
        match self {
            AlignModalities::Rgb => "rgb",
            AlignModalities::Sn => "sn",
            AlignModalities::Both => "both",
        }
    }

    pub fn includes_rgb(self) -> bool {
        matches!(self, AlignModalities::Rgb | AlignModalities::Both)
    }

    pub fn includes_sn(self) -> bool {
        matches!(self, AlignModalities::Sn | AlignModalities::Both)
    }
}

impl FromStr for AlignModalities {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rgb" => Ok(AlignModalities::Rgb),
            "sn" => Ok(AlignModalities::Sn),
            "both" => Ok(AlignModalities::Both),
            other => Err(Error::Config(format!("unknown sfa modality set '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SfaConfig {
    pub enabled: bool,
    pub modalities: AlignModalities,
    /// Encoder stage (1-based) whose features are aligned.
    pub stage: usize,
    /// Sum the adversarial terms over locations instead of averaging.
    pub sum_reduction: bool,
}

impl Default for SfaConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            modalities: AlignModalities::Rgb,
            stage: 2,
            sum_reduction: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub weights: LossWeights,
    /// Pseudo-label confidence threshold.
    pub alpha: f64,
    pub rounds: usize,
    /// Epochs per round, counted over the source split.
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_seg: f64,
    pub lr_disc: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
    pub seed: u64,
    pub backbone: BackboneId,
    pub sn_enabled: bool,
    pub ccg_enabled: bool,
    /// Gate the context-modulated features instead of the raw encoder
    /// features when producing the fused outputs.
    pub ccg_gate_modulated: bool,
    pub sfa: SfaConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            alpha: 0.99,
            rounds: 3,
            epochs: 10,
            batch_size: 4,
            lr_seg: 2.5e-4,
            lr_disc: 1e-3,
            momentum: 0.9,
            weight_decay: 5e-4,
            poly_power: 0.9,
            seed: 0,
            backbone: BackboneId::SmallCnn,
            sn_enabled: true,
            ccg_enabled: true,
            ccg_gate_modulated: false,
            sfa: SfaConfig::default(),
        }
    }
}

/// Every accepted key, in echo order.
pub const CONFIG_KEYS: &[&str] = &[
    "loss.lambda1_s",
    "loss.lambda2_s",
    "loss.lambda3_s",
    "loss.lambda1_t",
    "loss.lambda2_t",
    "loss.lambda3_t",
    "loss.lambda4",
    "pseudo.alpha",
    "trainer.rounds",
    "trainer.epochs",
    "trainer.batch_size",
    "trainer.lr_seg",
    "trainer.lr_disc",
    "trainer.momentum",
    "trainer.weight_decay",
    "trainer.poly_power",
    "trainer.seed",
    "model.backbone",
    "model.sn",
    "ccg.enabled",
    "ccg.gate_modulated",
    "sfa.enabled",
    "sfa.modalities",
    "sfa.stage",
    "sfa.sum_reduction",
];

fn as_f64(key: &str, v: &Value) -> Result<f64> {
    match v {
        Value::Number(n) => n.as_f64(),
        Value::String(s) => s.parse().ok(),
        _ => None,
    }
    .ok_or_else(|| Error::Config(format!("{key}: expected a number, got {v}")))
}

fn as_usize(key: &str, v: &Value) -> Result<usize> {
    match v {
        Value::Number(n) => n.as_u64(),
        Value::String(s) => s.parse().ok(),
        _ => None,
    }
    .map(|n| n as usize)
    .ok_or_else(|| Error::Config(format!("{key}: expected a non-negative integer, got {v}")))
}

fn as_u64(key: &str, v: &Value) -> Result<u64> {
    match v {
        Value::Number(n) => n.as_u64(),
        Value::String(s) => s.parse().ok(),
        _ => None,
    }
    .ok_or_else(|| Error::Config(format!("{key}: expected an unsigned integer, got {v}")))
}

fn as_bool(key: &str, v: &Value) -> Result<bool> {
    match v {
        Value::Bool(b) => Some(*b),
        Value::String(s) => s.parse().ok(),
        _ => None,
    }
    .ok_or_else(|| Error::Config(format!("{key}: expected a boolean, got {v}")))
}

fn as_str<'a>(key: &str, v: &'a Value) -> Result<&'a str> {
    v.as_str()
        .ok_or_else(|| Error::Config(format!("{key}: expected a string, got {v}")))
}

impl TrainConfig {
    /// Reads a config file. An empty file yields the defaults.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        if text.trim().is_empty() {
            return Ok(Self::default());
        }
        let value: Value =
            serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        let map = value
            .as_object()
            .ok_or_else(|| Error::format(path, "config must be a JSON object"))?;
        Self::from_flat(map)
    }

    /// Builds a config from dotted keys on top of the defaults.
    pub fn from_flat(map: &Map<String, Value>) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply(map)?;
        Ok(cfg)
    }

    /// Applies dotted keys to this config and revalidates. When the backbone
    /// changes and no adversarial weight is given, the weight follows the
    /// backbone default.
    pub fn apply(&mut self, map: &Map<String, Value>) -> Result<()> {
        for (k, v) in map {
            self.set(k, v)?;
        }
        if map.contains_key("model.backbone") && !map.contains_key("loss.lambda4") {
            self.weights.adv = self.backbone.default_adv_weight();
        }
        self.validate()
    }

    /// Sets one key without revalidating.
    pub fn set(&mut self, key: &str, v: &Value) -> Result<()> {
        let w = &mut self.weights;
        match key {
            "loss.lambda1_s" => w.rgb_seg_s = as_f64(key, v)?,
            "loss.lambda2_s" => w.sn_seg_s = as_f64(key, v)?,
            "loss.lambda3_s" => w.seg_s = as_f64(key, v)?,
            "loss.lambda1_t" => w.rgb_seg_t = as_f64(key, v)?,
            "loss.lambda2_t" => w.sn_seg_t = as_f64(key, v)?,
            "loss.lambda3_t" => w.seg_t = as_f64(key, v)?,
            "loss.lambda4" => w.adv = as_f64(key, v)?,
            "pseudo.alpha" => self.alpha = as_f64(key, v)?,
            "trainer.rounds" => self.rounds = as_usize(key, v)?,
            "trainer.epochs" => self.epochs = as_usize(key, v)?,
            "trainer.batch_size" => self.batch_size = as_usize(key, v)?,
            "trainer.lr_seg" => self.lr_seg = as_f64(key, v)?,
            "trainer.lr_disc" => self.lr_disc = as_f64(key, v)?,
            "trainer.momentum" => self.momentum = as_f64(key, v)?,
            "trainer.weight_decay" => self.weight_decay = as_f64(key, v)?,
            "trainer.poly_power" => self.poly_power = as_f64(key, v)?,
            "trainer.seed" => self.seed = as_u64(key, v)?,
            "model.backbone" => self.backbone = as_str(key, v)?.parse()?,
            "model.sn" => self.sn_enabled = as_bool(key, v)?,
            "ccg.enabled" => self.ccg_enabled = as_bool(key, v)?,
            "ccg.gate_modulated" => self.ccg_gate_modulated = as_bool(key, v)?,
            "sfa.enabled" => self.sfa.enabled = as_bool(key, v)?,
            "sfa.modalities" => self.sfa.modalities = as_str(key, v)?.parse()?,
            "sfa.stage" => self.sfa.stage = as_usize(key, v)?,
            "sfa.sum_reduction" => self.sfa.sum_reduction = as_bool(key, v)?,
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Applies `key=value` overrides in order; the last writer wins. Values
    /// are parsed as JSON when possible and taken as strings otherwise.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        let mut map = Map::new();
        for o in overrides {
            let (k, v) = parse_override(o.as_ref())?;
            map.insert(k, v);
        }
        self.apply(&map)
    }

    pub fn validate(&self) -> Result<()> {
        let w = &self.weights;
        for (name, x) in [
            ("loss.lambda1_s", w.rgb_seg_s),
            ("loss.lambda2_s", w.sn_seg_s),
            ("loss.lambda3_s", w.seg_s),
            ("loss.lambda1_t", w.rgb_seg_t),
            ("loss.lambda2_t", w.sn_seg_t),
            ("loss.lambda3_t", w.seg_t),
            ("loss.lambda4", w.adv),
            ("trainer.lr_seg", self.lr_seg),
            ("trainer.lr_disc", self.lr_disc),
            ("trainer.weight_decay", self.weight_decay),
            ("trainer.poly_power", self.poly_power),
        ] {
            if !(x.is_finite() && x >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {x}")));
            }
        }
        if !(self.alpha > 0.5 && self.alpha <= 1.0) {
            return Err(Error::Config(format!(
                "pseudo.alpha must lie in (0.5, 1], got {}",
                self.alpha
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "trainer.momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        for (name, n) in [
            ("trainer.rounds", self.rounds),
            ("trainer.epochs", self.epochs),
            ("trainer.batch_size", self.batch_size),
        ] {
            if n == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if !(1..=4).contains(&self.sfa.stage) {
            return Err(Error::Config(format!(
                "sfa.stage must be in 1..=4, got {}",
                self.sfa.stage
            )));
        }
        if self.sfa.enabled && self.sfa.modalities.includes_sn() && !self.sn_enabled {
            return Err(Error::Config(
                "sfa.modalities includes sn but model.sn is disabled".into(),
            ));
        }
        if self.ccg_enabled && !self.sn_enabled {
            return Err(Error::Config("ccg.enabled requires model.sn".into()));
        }
        Ok(())
    }

    /// Flat dotted-key representation, the inverse of [`from_flat`](Self::from_flat).
    pub fn to_flat(&self) -> BTreeMap<String, Value> {
        let w = &self.weights;
        let pairs: Vec<(&str, Value)> = vec![
            ("loss.lambda1_s", w.rgb_seg_s.into()),
            ("loss.lambda2_s", w.sn_seg_s.into()),
            ("loss.lambda3_s", w.seg_s.into()),
            ("loss.lambda1_t", w.rgb_seg_t.into()),
            ("loss.lambda2_t", w.sn_seg_t.into()),
            ("loss.lambda3_t", w.seg_t.into()),
            ("loss.lambda4", w.adv.into()),
            ("pseudo.alpha", self.alpha.into()),
            ("trainer.rounds", self.rounds.into()),
            ("trainer.epochs", self.epochs.into()),
            ("trainer.batch_size", self.batch_size.into()),
            ("trainer.lr_seg", self.lr_seg.into()),
            ("trainer.lr_disc", self.lr_disc.into()),
            ("trainer.momentum", self.momentum.into()),
            ("trainer.weight_decay", self.weight_decay.into()),
            ("trainer.poly_power", self.poly_power.into()),
            ("trainer.seed", self.seed.into()),
            ("model.backbone", self.backbone.as_str().into()),
            ("model.sn", self.sn_enabled.into()),
            ("ccg.enabled", self.ccg_enabled.into()),
            ("ccg.gate_modulated", self.ccg_gate_modulated.into()),
            ("sfa.enabled", self.sfa.enabled.into()),
            ("sfa.modalities", self.sfa.modalities.as_str().into()),
            ("sfa.stage", self.sfa.stage.into()),
            ("sfa.sum_reduction", self.sfa.sum_reduction.into()),
        ];
        pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_flat()).expect("config serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text)?;
        let map = value
            .as_object()
            .ok_or_else(|| Error::Config("config must be a JSON object".into()))?;
        Self::from_flat(map)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}

impl fmt::Display for TrainConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_json())
    }
}

pub fn parse_override(s: &str) -> Result<(String, Value)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{s}' is not key=value")))?;
    let k = k.trim();
    if !CONFIG_KEYS.contains(&k) {
        return Err(Error::Config(format!("unknown config key '{k}'")));
    }
    let v = v.trim();
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.to_string(), value))
}
