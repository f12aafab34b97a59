//! ComposeAE: composing an image query with a modification text by rotating
//! the image embedding in a complex space, plus the losses, training loop and
//! recall@k evaluation needed to train and measure it on pre-extracted
//! feature vectors.
//!
//! Everything differentiable is expressed through the small reverse-mode
//! engine in [`numerics`].

pub mod composition;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod numerics;
pub mod training;

pub use composition::{Model, ModelConfig, ModelParams, Variant};
pub use data::{FeatureDataset, SynthConfig};
pub use error::{Error, Result};
pub use evaluation::RetrievalReport;
pub use losses::{BaseLoss, LossWeights};
pub use numerics::{Scalar, Tape, Tensor, Var};
pub use training::{Checkpoint, MetricsHistory, TrainConfig, Trainer};
