//! Persistence of pseudo labels between self-training rounds.
//!
//! Layout under the store directory:
//!
//! ```text
//! round-2/meta.json        {"round": 2, "producer_round": 1, "alpha": 0.99, "ids": [...]}
//! round-2/label/<id>.png   0 = background, 255 = foreground
//! round-2/ignore/<id>.png  255 = excluded from every loss
//! ```

use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::png;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelRecord {
    pub id: String,
    /// {0, 1}; meaningless where `ignore` is set.
    pub label: Array2<u8>,
    pub ignore: Array2<bool>,
    /// Round whose network produced the labels.
    pub producer_round: usize,
    pub alpha: f64,
}

impl PseudoLabelRecord {
    pub fn ignored_fraction(&self) -> f64 {
        let n = self.ignore.len().max(1);
        self.ignore.iter().filter(|&&i| i).count() as f64 / n as f64
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct StoreMeta {
    round: usize,
    producer_round: usize,
    alpha: f64,
    ids: Vec<String>,
}

/// Result of reading a store back.
#[derive(Debug)]
pub struct LoadedPseudoLabels {
    pub records: Vec<PseudoLabelRecord>,
    /// Set when the stored threshold differs from the one the caller expects.
    pub alpha_mismatch: Option<AlphaMismatch>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlphaMismatch {
    pub stored: f64,
    pub expected: f64,
}

pub fn round_dir(store: &Path, round: usize) -> PathBuf {
    store.join(format!("round-{round}"))
}

/// Writes the pseudo labels consumed by `round`.
pub fn save_pseudo_labels(store: &Path, round: usize, records: &[PseudoLabelRecord]) -> Result<PathBuf> {
    let first = records
        .first()
        .ok_or_else(|| Error::Input("no pseudo-label records to save".into()))?;
    let (producer_round, alpha) = (first.producer_round, first.alpha);
    if records
        .iter()
        .any(|r| r.producer_round != producer_round || r.alpha != alpha)
    {
        return Err(Error::Input(
            "pseudo-label records of one store must share round and alpha".into(),
        ));
    }
    let dir = round_dir(store, round);
    for r in records {
        if r.label.dim() != r.ignore.dim() {
            return Err(Error::Input(format!("label/ignore size mismatch for '{}'", r.id)));
        }
        png::write_mask(&dir.join("label").join(format!("{}.png", r.id)), &r.label)?;
        png::write_mask(
            &dir.join("ignore").join(format!("{}.png", r.id)),
            &r.ignore.mapv(u8::from),
        )?;
    }
    let meta = StoreMeta {
        round,
        producer_round,
        alpha,
        ids: records.iter().map(|r| r.id.clone()).collect(),
    };
    let path = dir.join("meta.json");
    std::fs::write(&path, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(path, e))?;
    Ok(dir)
}

/// Reads the pseudo labels consumed by `round`. A differing `expected_alpha`
/// is reported rather than treated as an error.
pub fn load_pseudo_labels(
    store: &Path,
    round: usize,
    expected_alpha: Option<f64>,
) -> Result<LoadedPseudoLabels> {
    let dir = round_dir(store, round);
    let meta_path = dir.join("meta.json");
    let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: StoreMeta =
        serde_json::from_str(&text).map_err(|e| Error::format(&meta_path, e.to_string()))?;
    let records = meta
        .ids
        .iter()
        .map(|id| {
            let label = png::read_mask(&dir.join("label").join(format!("{id}.png")))?;
            let ignore = png::read_mask(&dir.join("ignore").join(format!("{id}.png")))?.mapv(|v| v == 1);
            Ok(PseudoLabelRecord {
                id: id.clone(),
                label,
                ignore,
                producer_round: meta.producer_round,
                alpha: meta.alpha,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let alpha_mismatch = expected_alpha
        .filter(|&e| e != meta.alpha)
        .map(|expected| AlphaMismatch {
            stored: meta.alpha,
            expected,
        });
    if let Some(m) = alpha_mismatch {
        log::warn!(
            "pseudo labels in {} were made with alpha={} but alpha={} is configured",
            dir.display(),
            m.stored,
            m.expected
        );
    }
    Ok(LoadedPseudoLabels {
        records,
        alpha_mismatch,
    })
}
