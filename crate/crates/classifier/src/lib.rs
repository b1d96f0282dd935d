//! Hand-region classifiers: the appearance-only HRC and the pose-fused HRC_P,
//! a double-precision CPU engine to run them, and the training harness.

pub mod checkpoint;
mod error;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod tensor;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, ModelCheckpoint};
pub use error::ClassifierError;
pub use model::{BackboneScale, Batch, Model, ModelConfig, Prediction, Variant};
pub use tensor::Tensor;
pub use train::{train, TrainConfig, TrainingMeta};
