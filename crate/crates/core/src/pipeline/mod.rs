//! Volume I/O, preprocessing and sliding-window inference.

pub mod io;
pub mod nifti;
pub mod preprocess;
pub mod sliding;
pub mod volume;
pub mod window;

pub use io::{read_mask, read_volume, write_volume};
pub use preprocess::{normalize_hu, preprocess, resample_nearest, resample_trilinear};
pub use sliding::{binarize, infer_volume, reconstruct, sliding_infer, GradCamModel, NetworkModel, PatchModel};
pub use volume::{Volume, VolumeKind};
pub use window::{gaussian_window, plan_windows, WindowPlan};
