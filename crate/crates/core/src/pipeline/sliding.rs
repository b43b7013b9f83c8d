//! Gaussian-weighted patch reconstruction.

use crate::error::{Error, Result};
use crate::network::{grad_cam, Network, ParamStore};
use crate::ops;
use crate::par;
use crate::tensor::Tensor5;

use super::preprocess::preprocess;
use super::volume::{Volume, VolumeKind};
use super::window::{plan_windows, WindowPlan};

/// Added to the weight sum before dividing.
pub const ACC_EPS: f64 = 1e-10;

/// Anything that maps a (1, 1, d, h, w) patch to per-voxel values in [0, 1].
pub trait PatchModel: Sync {
    fn patch_shape(&self) -> [usize; 3];
    fn predict_patch(&self, patch: &Tensor5<f32>) -> Result<Tensor5<f32>>;
}

/// Sigmoid probabilities from a network in inference mode.
pub struct NetworkModel<'a> {
    pub net: &'a Network,
    pub params: &'a ParamStore<f32>,
}

impl PatchModel for NetworkModel<'_> {
    fn patch_shape(&self) -> [usize; 3] {
        self.net.config().patch_shape
    }

    fn predict_patch(&self, patch: &Tensor5<f32>) -> Result<Tensor5<f32>> {
        Ok(ops::sigmoid(&self.net.predict(self.params, patch)?))
    }
}

/// Per-patch Grad-CAM maps. The network config must capture the bottleneck.
pub struct GradCamModel<'a> {
    pub net: &'a Network,
    pub params: &'a ParamStore<f32>,
}

impl PatchModel for GradCamModel<'_> {
    fn patch_shape(&self) -> [usize; 3] {
        self.net.config().patch_shape
    }

    fn predict_patch(&self, patch: &Tensor5<f32>) -> Result<Tensor5<f32>> {
        grad_cam(self.net, self.params, patch)
    }
}

/// Weighted numerator and weight sum over the padded grid.
pub struct Accumulator {
    dims: [usize; 3],
    weighted: Vec<f64>,
    weights: Vec<f64>,
}

impl Accumulator {
    pub fn new(dims: [usize; 3]) -> Self {
        let n = dims.iter().product();
        Accumulator {
            dims,
            weighted: vec![0.0; n],
            weights: vec![0.0; n],
        }
    }

    pub fn add(&mut self, start: [usize; 3], pred: &Tensor5<f32>, window: &Tensor5<f32>) {
        let s = window.shape();
        let [_, h, w] = self.dims;
        let (p, wt) = (pred.data(), window.data());
        for z in 0..s.d {
            for y in 0..s.h {
                let src = (z * s.h + y) * s.w;
                let dst = ((start[0] + z) * h + start[1] + y) * w + start[2];
                for x in 0..s.w {
                    let wv = wt[src + x] as f64;
                    self.weighted[dst + x] += p[src + x] as f64 * wv;
                    self.weights[dst + x] += wv;
                }
            }
        }
    }

    pub fn weight_sum(&self) -> &[f64] {
        &self.weights
    }

    pub fn finish(&self) -> Vec<f32> {
        self.weighted
            .iter()
            .zip(&self.weights)
            .map(|(&n, &d)| (n / (d + ACC_EPS)).clamp(0.0, 1.0) as f32)
            .collect()
    }
}

/// Folds per-window predictions into a volume over the padded grid. Windows
/// are predicted in batches of `batch` through `predict` (which may run in
/// parallel) and accumulated strictly in plan order.
pub fn reconstruct<F>(plan: &WindowPlan, batch: usize, predict: F) -> Result<Vec<f32>>
where
    F: Fn(usize) -> Result<Tensor5<f32>> + Send + Sync,
{
    let mut acc = Accumulator::new(plan.padded_dims);
    let expect = plan.weights.shape();
    for first in (0..plan.len()).step_by(batch.max(1)) {
        let n = batch.max(1).min(plan.len() - first);
        let preds = par::map_range(n, |j| predict(first + j));
        for (j, pred) in preds.into_iter().enumerate() {
            let pred = pred?;
            if pred.shape() != expect {
                return Err(Error::shape("patch prediction", pred.shape(), expect));
            }
            acc.add(plan.starts[first + j], &pred, &plan.weights);
        }
    }
    Ok(acc.finish())
}

/// Tiles `v`, predicts every window and blends the results into a
/// probability volume on `v`'s grid.
pub fn sliding_infer(v: &Volume, model: &dyn PatchModel, plan: &WindowPlan) -> Result<Volume> {
    if model.patch_shape() != plan.patch {
        return Err(Error::shape("model patch vs plan patch", model.patch_shape(), plan.patch));
    }
    if plan.volume_dims != v.dims() {
        return Err(Error::shape("plan volume vs input volume", plan.volume_dims, v.dims()));
    }
    let padded = v.padded_to(plan.patch);
    let batch = par::current_threads();
    let data = reconstruct(plan, batch, |i| {
        model.predict_patch(&padded.block(plan.starts[i], plan.patch))
    })?;
    let full = padded.with_data(data, VolumeKind::Probability)?;
    full.cropped_to(v.dims())
}

/// Preprocesses `image` onto the 1 mm grid and runs `model` over every
/// window. The result lives on the preprocessed grid.
pub fn infer_volume(image: &Volume, model: &dyn PatchModel) -> Result<Volume> {
    let pre = preprocess(image)?;
    let plan = plan_windows(pre.dims(), model.patch_shape())?;
    sliding_infer(&pre, model, &plan)
}

/// Mask of voxels strictly above `threshold`.
pub fn binarize(p: &Volume, threshold: f64) -> Result<Volume> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::InvalidArgument(format!("threshold {threshold} outside [0, 1]")));
    }
    let data = p.data().iter().map(|&x| ((x as f64) > threshold) as u8 as f32).collect();
    p.with_data(data, VolumeKind::BinaryMask)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub struct Constant(pub f32, pub [usize; 3]);

    impl PatchModel for Constant {
        fn patch_shape(&self) -> [usize; 3] {
            self.1
        }

        fn predict_patch(&self, patch: &Tensor5<f32>) -> Result<Tensor5<f32>> {
            Ok(Tensor5::full(patch.shape(), self.0))
        }
    }

    #[test]
    fn constant_model_reconstructs_constant() {
        let v = Volume::zeros([13, 40, 21], [1.0; 3], VolumeKind::Normalized).unwrap();
        let plan = plan_windows(v.dims(), [8, 16, 16]).unwrap();
        let out = sliding_infer(&v, &Constant(0.7, [8, 16, 16]), &plan).unwrap();
        assert_eq!(out.dims(), v.dims());
        assert!(out.data().iter().all(|&x| (x - 0.7).abs() < 1e-6));
    }

    #[test]
    fn patch_mismatch_rejected() {
        let v = Volume::zeros([8, 16, 16], [1.0; 3], VolumeKind::Normalized).unwrap();
        let plan = plan_windows(v.dims(), [8, 16, 16]).unwrap();
        assert!(sliding_infer(&v, &Constant(0.5, [8, 8, 8]), &plan).is_err());
    }

    #[test]
    fn binarize_is_strict() {
        let v = Volume::new([1, 1, 3], [1.0; 3], vec![0.5, 0.7, 0.0], VolumeKind::Probability).unwrap();
        assert_eq!(binarize(&v, 0.5).unwrap().data(), &[0.0, 1.0, 0.0]);
        assert_eq!(binarize(&v, 0.0).unwrap().data(), &[1.0, 1.0, 0.0]);
        assert!(binarize(&v, 1.5).is_err());
    }
}
