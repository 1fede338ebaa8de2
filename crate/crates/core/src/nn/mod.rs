//! Minimal dense-tensor neural network toolkit: a reverse-mode tape, the
//! layer ops needed for small CNN regressors, dual-head models, losses,
//! an SGD trainer and checkpoints.

pub mod checkpoint;
pub mod loss;
pub mod model;
pub mod tape;
pub mod tensor;
pub mod train;

pub use model::{ForwardPass, GaussianPrediction, Model, Param, LOGSIGMA_MAX, LOGSIGMA_MIN};
pub use tape::{Gradients, NodeId, Tape};
pub use tensor::Tensor;
pub use train::{cosine_lr, train, LossKind, TrainConfig, TrainHistory};
