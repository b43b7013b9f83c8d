//! Forward and reverse-mode kernels for every primitive of the network.

pub mod batchnorm;
pub mod conv;
pub mod elementwise;
pub mod pool;
pub mod upsample;

pub use batchnorm::{bn_backward, bn_infer_forward, bn_train_forward, BnSaved, BnState, Mode};
pub use conv::{conv3d_backward, conv3d_forward, kernel_extent, ConvContext, ConvGrads, ConvSpec};
pub use elementwise::{add, concat_channels, relu, relu_backward, sigmoid, sigmoid_scalar, split_channels};
pub use pool::{maxpool3d, maxpool3d_backward, PoolOutput};
pub use upsample::{trilinear_upsample2, trilinear_upsample2_backward};
