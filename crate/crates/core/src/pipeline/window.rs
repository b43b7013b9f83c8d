//! Patch tiling and the Gaussian importance field.

use crate::error::{Error, Result};
use crate::tensor::Tensor5;

pub const WEIGHT_FLOOR: f64 = 1e-3;

/// Unit-peak Gaussian profile along one axis, sigma = len / 8, centred at (len - 1) / 2.
pub fn gaussian_profile(len: usize) -> Vec<f64> {
    let sigma = len as f64 / 8.0;
    let c = (len as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..len)
        .map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let peak = g.iter().cloned().fold(0.0, f64::max);
    g.into_iter().map(|v| v / peak).collect()
}

/// Separable weight field of shape (1, 1, d, h, w), peak 1, floored at 1e-3.
pub fn gaussian_window(patch: [usize; 3]) -> Tensor5<f32> {
    let [gz, gy, gx] = patch.map(gaussian_profile);
    let mut data = Vec::with_capacity(patch.iter().product());
    for &a in &gz {
        for &b in &gy {
            data.extend(gx.iter().map(|&c| (a * b * c).max(WEIGHT_FLOOR) as f32));
        }
    }
    Tensor5::from_vec([1, 1, patch[0], patch[1], patch[2]], data).expect("window length")
}

/// Window starts along one axis of length `len` (padded up to `patch`).
pub fn axis_starts(len: usize, patch: usize) -> Vec<usize> {
    if len <= patch {
        return vec![0];
    }
    let stride = (patch / 2).max(1);
    let last = len - patch;
    let mut starts: Vec<usize> = (0..).map(|k| k * stride).take_while(|&s| s <= last).collect();
    if *starts.last().unwrap() != last {
        starts.push(last);
    }
    starts
}

#[derive(Clone, Debug)]
pub struct WindowPlan {
    pub patch: [usize; 3],
    pub stride: [usize; 3],
    pub volume_dims: [usize; 3],
    /// Volume dims after zero-padding every axis up to the patch.
    pub padded_dims: [usize; 3],
    /// (z, y, x) offsets in raster order.
    pub starts: Vec<[usize; 3]>,
    pub weights: Tensor5<f32>,
}

pub fn plan_windows(volume_dims: [usize; 3], patch: [usize; 3]) -> Result<WindowPlan> {
    if patch.contains(&0) || volume_dims.contains(&0) {
        return Err(Error::InvalidArgument(format!(
            "cannot tile volume {volume_dims:?} with patch {patch:?}"
        )));
    }
    let padded = [0, 1, 2].map(|a| volume_dims[a].max(patch[a]));
    let [sz, sy, sx] = [0, 1, 2].map(|a| axis_starts(padded[a], patch[a]));
    let mut starts = Vec::with_capacity(sz.len() * sy.len() * sx.len());
    for &z in &sz {
        for &y in &sy {
            for &x in &sx {
                starts.push([z, y, x]);
            }
        }
    }
    Ok(WindowPlan {
        patch,
        stride: patch.map(|p| (p / 2).max(1)),
        volume_dims,
        padded_dims: padded,
        starts,
        weights: gaussian_window(patch),
    })
}

impl WindowPlan {
    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }
}
