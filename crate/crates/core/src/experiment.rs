//! The small two-domain experiment used to compare ablation presets.

use candle_core::DType;

use crate::dataio::png::{image_to_rgb, rgb_to_image};
use crate::dataio::{MemorySplit, Sample, SplitRole, TrainConfig};
use crate::error::Result;
use crate::geometry::DepthMap;
use crate::presets::ablation_preset;
use crate::scenegen::GenConfig;
use crate::trainer::Datasets;

/// Sizes and seed of a generated source/target pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToySetup {
    pub seed: u64,
    pub size: usize,
    pub source: usize,
    pub target_train: usize,
    pub target_eval: usize,
}

impl Default for ToySetup {
    fn default() -> Self {
        Self {
            seed: 0,
            size: 64,
            source: 64,
            target_train: 64,
            target_eval: 32,
        }
    }
}

/// Training knobs applied on top of a preset for the toy runs.
pub const TOY_OVERRIDES: &[&str] = &[
    "trainer.rounds=1",
    "trainer.epochs=6",
    "trainer.batch_size=4",
    "trainer.lr_seg=0.02",
    "trainer.lr_disc=0.0002",
    "loss.lambda4=0.01",
];

impl ToySetup {
    /// Renders the domains `gen-data` writes for this seed and sizes, in
    /// memory and quantized as on disk. Target-train labels are dropped.
    pub fn splits(&self) -> Result<[MemorySplit; 3]> {
        let gen = GenConfig::two_domain(self.seed, self.size, self.source, self.target_train, self.target_eval);
        let mut by_role = [Vec::new(), Vec::new(), Vec::new()];
        for (role, _, scene) in gen.domains[0].render_all()?.into_iter().chain(gen.domains[1].render_all()?) {
            let slot = match role {
                SplitRole::SourceTrain => 0,
                SplitRole::TargetTrain => 1,
                SplitRole::TargetEval => 2,
            };
            by_role[slot].push(as_stored(scene.sample));
        }
        let [s, tt, te] = by_role;
        Ok([
            MemorySplit::new(SplitRole::SourceTrain, s),
            MemorySplit::new(SplitRole::TargetTrain, tt),
            MemorySplit::new(SplitRole::TargetEval, te),
        ])
    }

    /// All three splits as tensors, normals included.
    pub fn datasets(&self, dtype: DType) -> Result<Datasets> {
        let [s, tt, te] = self.splits()?;
        Datasets::load(&s, &tt, Some(&te), true, dtype)
    }
}

/// The sample as it reads back from disk: 8-bit RGB, millimeter depth.
fn as_stored(s: Sample) -> Sample {
    Sample {
        rgb: image_to_rgb(&rgb_to_image(&s.rgb)),
        depth: DepthMap::from_millimeters(&s.depth.to_millimeters()),
        normals: None,
        ..s
    }
}

/// `name`'s preset with the toy training knobs and `seed`.
pub fn toy_config(name: &str, seed: u64) -> Result<TrainConfig> {
    let mut cfg = ablation_preset(name)?;
    cfg.apply_overrides(TOY_OVERRIDES)?;
    cfg.seed = seed;
    cfg.validate()?;
    Ok(cfg)
}
