//! EffCNet: dense blocks built from depthwise-separable convolutions, with
//! a small reverse-mode autograd engine, a static parameter/FLOP analyzer,
//! AutoAugment-style policies, CIFAR ingestion, training and checkpoints.

pub mod augment;
pub mod autograd;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod image;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;

pub use autograd::{backward, grad_check, Gradients, Tape, Var};
pub use error::{Error, Result};
pub use model::{CostReport, Model, NetworkConfig, Variant};
pub use tensor::{Element, Fill, Tensor};
