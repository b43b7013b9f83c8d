//! Network assembly, parameters, checkpoints and Grad-CAM.

pub mod checkpoint;
pub mod config;
pub mod gradcam;
pub mod model;
pub mod params;
pub mod summary;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, OptimizerSnapshot, TrainingMeta};
pub use config::{DilationPreset, ModelConfig};
pub use gradcam::grad_cam;
pub use model::{param_count, ContextBlock, ConvLayer, ForwardOutput, Network, ResidualBlock};
pub use params::{ParamKind, ParamSpec, ParamStore};
pub use summary::{summarize, Summary};
