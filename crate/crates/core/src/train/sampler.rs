//! Random patch crops with optional foreground bias.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::pipeline::{preprocess, Volume};
use crate::tensor::Tensor5;

/// A normalized image and its mask on the same grid, padded to at least the patch.
#[derive(Clone, Debug)]
pub struct TrainCase {
    pub image: Volume,
    pub mask: Volume,
    foreground: Vec<usize>,
}

impl TrainCase {
    /// Preprocesses `image` and pads both volumes up to `patch`.
    pub fn new(image: &Volume, mask: &Volume, patch: [usize; 3]) -> Result<Self> {
        if image.dims() != mask.dims() {
            return Err(Error::shape("image vs mask", image.dims(), mask.dims()));
        }
        let image = preprocess(image)?.padded_to(patch);
        let mask = crate::pipeline::resample_nearest(mask, crate::pipeline::preprocess::TARGET_SPACING)?
            .padded_to(patch);
        let foreground = mask
            .data()
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0.0)
            .map(|(i, _)| i)
            .collect();
        Ok(TrainCase { image, mask, foreground })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.image.dims()
    }

    pub fn foreground_len(&self) -> usize {
        self.foreground.len()
    }
}

pub struct PatchSampler {
    pub patch: [usize; 3],
    /// Probability that a crop is forced to contain a foreground voxel.
    pub fg_fraction: f64,
    rng: ChaCha8Rng,
}

impl PatchSampler {
    pub fn new(patch: [usize; 3], fg_fraction: f64, seed: u64) -> Self {
        PatchSampler {
            patch,
            fg_fraction,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Start of a crop inside `case`.
    pub fn start(&mut self, case: &TrainCase) -> [usize; 3] {
        let dims = case.dims();
        let biased = !case.foreground.is_empty() && self.rng.gen_bool(self.fg_fraction);
        if biased {
            let i = case.foreground[self.rng.gen_range(0..case.foreground.len())];
            let [_, h, w] = dims;
            let voxel = [i / (h * w), (i / w) % h, i % w];
            [0, 1, 2].map(|a| {
                let hi = voxel[a].min(dims[a] - self.patch[a]);
                let lo = (voxel[a] + 1).saturating_sub(self.patch[a]);
                self.rng.gen_range(lo..=hi)
            })
        } else {
            [0, 1, 2].map(|a| self.rng.gen_range(0..=dims[a] - self.patch[a]))
        }
    }

    /// A batch of (image, label) crops, each drawn from a uniformly chosen case.
    pub fn batch(&mut self, cases: &[TrainCase], size: usize) -> Result<(Tensor5<f32>, Tensor5<f32>)> {
        if cases.is_empty() || size == 0 {
            return Err(Error::InvalidArgument("empty training batch".into()));
        }
        let mut xs = Vec::with_capacity(size);
        let mut ys = Vec::with_capacity(size);
        for _ in 0..size {
            let case = &cases[self.rng.gen_range(0..cases.len())];
            let s = self.start(case);
            xs.push(case.image.block(s, self.patch));
            ys.push(case.mask.block(s, self.patch));
        }
        Ok((Tensor5::stack(&xs)?, Tensor5::stack(&ys)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::VolumeKind;

    #[test]
    fn biased_crop_contains_chosen_voxel() {
        let mut mask = vec![0f32; 40 * 40 * 40];
        mask[(39 * 40) * 40 + 39] = 1.0;
        let mask = Volume::new([40, 40, 40], [1.0; 3], mask, VolumeKind::BinaryMask).unwrap();
        let img = Volume::zeros([40, 40, 40], [1.0; 3], VolumeKind::Intensity).unwrap();
        let case = TrainCase::new(&img, &mask, [16, 16, 16]).unwrap();
        let mut s = PatchSampler::new([16, 16, 16], 1.0, 3);
        for _ in 0..50 {
            let st = s.start(&case);
            assert!(st[0] <= 39 && st[0] + 16 > 39);
            assert!(st[1] == 0);
            assert!(st[2] + 16 > 39);
        }
    }

    #[test]
    fn batch_shapes() {
        let img = Volume::zeros([20, 20, 20], [1.0; 3], VolumeKind::Intensity).unwrap();
        let mask = Volume::zeros([20, 20, 20], [1.0; 3], VolumeKind::BinaryMask).unwrap();
        let case = TrainCase::new(&img, &mask, [8, 16, 24]).unwrap();
        assert_eq!(case.dims(), [20, 20, 24]);
        let (x, y) = PatchSampler::new([8, 16, 24], 0.5, 1).batch(&[case], 4).unwrap();
        assert_eq!(x.shape().dims(), [4, 1, 8, 16, 24]);
        assert_eq!(y.shape(), x.shape());
    }
}
