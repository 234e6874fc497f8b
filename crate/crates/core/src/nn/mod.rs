//! Differentiable layer kernels recorded on a [`Tape`](crate::autograd::Tape).

mod activation;
mod conv;
mod dropout;
mod linear;
mod loss;
mod norm;
mod permute;
mod pool;

pub use activation::{leaky_relu_derivative, leaky_relu_scalar, LEAKY_SLOPE};
pub use conv::{conv2d_direct, conv2d_forward, ConvAlgo, ConvKind, ConvSpec};
pub use loss::{cross_entropy_rows, softmax_rows};
pub use norm::{Mode, RunningStats, BN_EPSILON, BN_MOMENTUM};
pub use permute::shuffle_order;
