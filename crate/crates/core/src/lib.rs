//! Attention-based multiple instance learning on whole-slide images.
//!
//! The pipeline runs tissue tiling, patch embedding and fusion, gated
//! attention pooling with an MLP head, class-weighted training and
//! patient-grouped k-fold evaluation.

pub mod checkpoint;
pub mod dataset;
pub mod embedding;
pub mod error;
pub mod metrics;
pub mod mil;
pub mod rng;
pub mod synth;
pub mod tiling;
pub mod training;

pub use checkpoint::Checkpoint;
pub use dataset::{load_dataset, Dataset, DatasetManifest};
pub use embedding::{FeatureLayout, SlideEmbeddingSet};
pub use error::{Error, Result};
pub use metrics::MetricsReport;
pub use mil::{Bag, MilModel, ModelShape};
pub use synth::SynthSpec;
pub use training::{cross_validate, train_fold, TrainConfig};
