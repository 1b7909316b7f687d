//! Named ablation presets. Each one is the `full` configuration with a
//! documented set of keys changed.

use serde_json::Value;

use crate::dataio::TrainConfig;
use crate::error::{Error, Result};

/// Every preset with the keys it changes relative to `full`.
pub const PRESETS: &[(&str, &[(&str, &str)])] = &[
    ("full", &[]),
    (
        "rgb-only",
        &[("model.sn", "false"), ("ccg.enabled", "false"), ("sfa.enabled", "false")],
    ),
    ("rgb-sfa", &[("model.sn", "false"), ("ccg.enabled", "false")]),
    ("rgb-sfa-sn", &[("ccg.enabled", "false")]),
    ("sfa-sn-only", &[("ccg.enabled", "false"), ("sfa.modalities", "\"sn\"")]),
    ("sfa-both", &[("ccg.enabled", "false"), ("sfa.modalities", "\"both\"")]),
];

pub fn preset_names() -> impl Iterator<Item = &'static str> {
    PRESETS.iter().map(|(n, _)| *n)
}

/// Keys a preset changes relative to `full`, as `(key, JSON value)`.
pub fn preset_diff(name: &str) -> Result<&'static [(&'static str, &'static str)]> {
    PRESETS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, d)| *d)
        .ok_or_else(|| {
            let known: Vec<&str> = preset_names().collect();
            Error::Config(format!("unknown preset '{name}', expected one of {}", known.join(", ")))
        })
}

/// The default configuration with `name`'s changes applied.
pub fn ablation_preset(name: &str) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    let mut map = serde_json::Map::new();
    for (k, v) in preset_diff(name)? {
        let value: Value = serde_json::from_str(v)?;
        map.insert((*k).to_string(), value);
    }
    cfg.apply(&map)?;
    cfg.validate()?;
    Ok(cfg)
}
