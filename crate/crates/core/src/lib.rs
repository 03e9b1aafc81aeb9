//! Attention-gated, edge-supervised convolutional autoencoder for binary
//! image segmentation, built on a small reverse-mode autodiff engine, together
//! with the data, evaluation and training harness around it.

pub mod attention;
pub mod data;
pub mod edge;
mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
pub use data::{AugmentationSpec, Manifest, Sample, SampleRecord};
pub use eval::{ConfusionMatrix, FoldPlan, MetricsReport};
pub use model::{build_network, NetworkConfig, NetworkState};
pub use nn::{AdamConfig, LossConfig, ParamStore};
pub use train::{EarlyStopPolicy, ExperimentConfig, HyperConfig, TrainRunReport};
