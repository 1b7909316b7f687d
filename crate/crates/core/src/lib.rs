//! Cross-modality unsupervised domain adaptation for freespace detection.
//!
//! An RGB branch and a surface-normal branch are trained on a labeled source
//! domain and adapted to an unlabeled target domain through cross guidance,
//! foreground-weighted adversarial alignment and self-training rounds. See
//! the guide in `book/` for the concepts and the configuration reference.

pub mod backbone;
pub mod ccg;
pub mod dataio;
pub mod error;
pub mod experiment;
pub mod geometry;
pub mod metrics;
pub mod params;
pub mod presets;
pub mod rng;
pub mod scenegen;
pub mod sfa;
pub mod tensor_ops;
pub mod trainer;

pub use error::{Error, Result};

/// Compiles and runs the code blocks of the guide as doc-tests.
#[cfg(doctest)]
mod book {
    macro_rules! chapter {
        ($name:ident, $path:literal) => {
            #[doc = include_str!(concat!("../../../book/src/", $path))]
            pub struct $name;
        };
    }

    chapter!(Introduction, "introduction.md");
    chapter!(SurfaceNormals, "concepts/surface-normals.md");
    chapter!(SyntheticDomains, "concepts/synthetic-domains.md");
    chapter!(CrossGuidance, "concepts/cross-guidance.md");
    chapter!(ForegroundAlignment, "concepts/foreground-alignment.md");
    chapter!(SelfTraining, "concepts/self-training.md");
    chapter!(Metrics, "concepts/metrics.md");
    chapter!(ConfigReference, "config-reference.md");
    chapter!(Cli, "cli.md");
    chapter!(Ablations, "ablations.md");
}
