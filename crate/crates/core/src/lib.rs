//! Residual 3-D U-Net with a dilated context block: tensors and reverse-mode
//! autodiff, the network, losses and metrics, volume I/O and sliding-window
//! inference, and training on generated spine phantoms.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod loss;
pub mod metrics;
pub mod network;
pub mod ops;
pub mod par;
pub mod pipeline;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Real, Shape5, Tensor5};
