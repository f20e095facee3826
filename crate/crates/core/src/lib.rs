//! Segmentation learning without paired annotations.
//!
//! Stage 1 translates images to masks with a cycle-consistent adversarial
//! pair of generators, constrained by unpaired auxiliary shape masks through a
//! shape VAE and refined by discriminator-guided channel calibration. Stage 2
//! trains a segmentation network on the resulting pseudo labels with quality
//! based sample selection, a noise-weighted Dice loss and iterative
//! re-labelling.

pub mod checkpoint;
pub mod config;
pub mod cyclegan;
pub mod data;
pub mod dgcc;
mod error;
pub mod losses;
pub mod maskgen;
pub mod metrics;
pub mod nets;
pub mod noisy;
pub mod ops;
pub mod optim;
pub mod params;
pub mod pipeline;

pub(crate) use error::ensure_finite;
pub use error::{Error, Result};

pub use config::{PipelineConfig, Preset};
pub use cyclegan::{PretrainedVae, PseudoLabelRecord, Stage1Config, Stage1Trainer};
pub use data::{DatasetSplit, ImageSample, SplitOutcome};
pub use maskgen::{Canvas, EllipsePrior, MaskSet, ShapeMask};
pub use metrics::{EvalReport, Segmenter};
pub use noisy::{IterConfig, LqssConfig, SegLoss, SegmentationModel};
pub use pipeline::{bench_synthetic, BenchReport};
