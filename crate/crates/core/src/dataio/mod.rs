//! Dataset layout on disk, PNG codecs, configuration and the pseudo-label store.

pub mod config;
pub mod layout;
pub mod png;
pub mod pseudo;

pub use config::{AlignModalities, BackboneId, LossWeights, SfaConfig, TrainConfig};
pub use layout::{
    DataRoot, DatasetLayout, DiskSplit, LoadOptions, Manifest, ManifestEntry, MemorySplit, Sample,
    SampleSource, SplitRole,
};
pub use pseudo::{load_pseudo_labels, save_pseudo_labels, PseudoLabelRecord};
