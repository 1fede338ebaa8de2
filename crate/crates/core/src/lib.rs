//! Energy-aware filter pruning at initialization, variance-attenuation
//! training and uncertainty-routed hybrid inference for small CNN
//! regressors.
//!
//! The crate is organised bottom-up:
//!
//! - [`archspec`]: architecture descriptions, shape inference, filter masks
//! - [`energy`]: analytical FLOP and memory-access energy per layer
//! - [`pruner`]: energy-proportional stochastic filter pruning
//! - [`nn`]: tape-based reverse-mode autodiff, models, training, checkpoints
//! - [`synthdata`]: synthetic herbage-like images with area-fraction targets
//! - [`hybrid`]: σ-thresholded routing between a pruned and an unpruned model
//! - [`harness`]: experiment orchestration and reports

pub mod archspec;
pub mod energy;
pub mod error;
pub mod harness;
pub mod hybrid;
pub mod nn;
pub mod pruner;
pub mod synthdata;

pub use error::{Error, Result};
