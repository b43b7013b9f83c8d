//! Per-channel batch normalization over (n, d, h, w).

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{Real, Tensor5};

pub const DEFAULT_BN_EPS: f64 = 1e-5;
pub const DEFAULT_BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Affine parameters plus running statistics of one normalization layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnState<T: Real> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Option<Vec<T>>,
    pub running_var: Option<Vec<T>>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Real> BnState<T> {
    /// gamma = 1, beta = 0, running mean 0 and variance 1.
    pub fn identity(channels: usize) -> Self {
        BnState {
            gamma: vec![T::ONE; channels],
            beta: vec![T::ZERO; channels],
            running_mean: Some(vec![T::ZERO; channels]),
            running_var: Some(vec![T::ONE; channels]),
            momentum: DEFAULT_BN_MOMENTUM,
            eps: DEFAULT_BN_EPS,
        }
    }

    /// Fresh layer that has never seen a training batch.
    pub fn untracked(channels: usize) -> Self {
        BnState {
            running_mean: None,
            running_var: None,
            ..Self::identity(channels)
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Normalizes `x`; train mode also folds batch statistics into the running ones.
    pub fn forward(&mut self, x: &Tensor5<T>, mode: Mode) -> Result<(Tensor5<T>, BnSaved<T>)> {
        if x.shape().c != self.channels() {
            return Err(Error::shape("batchnorm channels", x.shape(), self.channels()));
        }
        match mode {
            Mode::Train => {
                let (y, saved) = bn_train_forward(x, &self.gamma, &self.beta, self.eps);
                let count = x.shape().n * x.shape().spatial();
                let c = self.channels();
                let rm = self.running_mean.get_or_insert_with(|| vec![T::ZERO; c]);
                let rv = self.running_var.get_or_insert_with(|| vec![T::ONE; c]);
                update_running(rm, rv, &saved, self.momentum, count);
                Ok((y, saved))
            }
            Mode::Infer => {
                let (Some(m), Some(v)) = (&self.running_mean, &self.running_var) else {
                    return Err(Error::UninitializedStats("<state>".into()));
                };
                Ok(bn_infer_forward(x, &self.gamma, &self.beta, m, v, self.eps))
            }
        }
    }
}

/// Statistics saved by the forward pass for the backward pass.
#[derive(Clone, Debug)]
pub struct BnSaved<T: Real> {
    pub mode: Mode,
    pub mean: Vec<T>,
    /// Biased batch variance (train) or running variance (infer).
    pub var: Vec<T>,
    pub inv_std: Vec<T>,
}

fn channel_moments<T: Real>(x: &Tensor5<T>) -> (Vec<T>, Vec<T>) {
    let s = x.shape();
    let count = (s.n * s.spatial()) as f64;
    let stats = par::map_range(s.c, |c| {
        let mut sum = 0.0f64;
        for n in 0..s.n {
            sum += x.slab(n, c).iter().map(|v| v.to_f64()).sum::<f64>();
        }
        let mean = sum / count;
        let mut sq = 0.0f64;
        for n in 0..s.n {
            sq += x
                .slab(n, c)
                .iter()
                .map(|v| {
                    let d = v.to_f64() - mean;
                    d * d
                })
                .sum::<f64>();
        }
        (T::from_f64(mean), T::from_f64(sq / count))
    });
    stats.into_iter().unzip()
}

fn normalize<T: Real>(x: &Tensor5<T>, gamma: &[T], beta: &[T], mean: &[T], inv_std: &[T]) -> Tensor5<T> {
    let s = x.shape();
    let mut y = Tensor5::zeros(s);
    par::for_each_chunk_mut(y.data_mut(), s.spatial(), |slab, dst| {
        let (n, c) = (slab / s.c, slab % s.c);
        let scale = gamma[c] * inv_std[c];
        let shift = beta[c] - mean[c] * scale;
        for (o, &v) in dst.iter_mut().zip(x.slab(n, c)) {
            *o = v * scale + shift;
        }
    });
    y
}

pub fn bn_train_forward<T: Real>(x: &Tensor5<T>, gamma: &[T], beta: &[T], eps: f64) -> (Tensor5<T>, BnSaved<T>) {
    let (mean, var) = channel_moments(x);
    let inv_std: Vec<T> = var
        .iter()
        .map(|v| T::from_f64(1.0 / (v.to_f64() + eps).sqrt()))
        .collect();
    let y = normalize(x, gamma, beta, &mean, &inv_std);
    (
        y,
        BnSaved {
            mode: Mode::Train,
            mean,
            var,
            inv_std,
        },
    )
}

pub fn bn_infer_forward<T: Real>(
    x: &Tensor5<T>,
    gamma: &[T],
    beta: &[T],
    running_mean: &[T],
    running_var: &[T],
    eps: f64,
) -> (Tensor5<T>, BnSaved<T>) {
    let inv_std: Vec<T> = running_var
        .iter()
        .map(|v| T::from_f64(1.0 / (v.to_f64() + eps).sqrt()))
        .collect();
    let y = normalize(x, gamma, beta, running_mean, &inv_std);
    (
        y,
        BnSaved {
            mode: Mode::Infer,
            mean: running_mean.to_vec(),
            var: running_var.to_vec(),
            inv_std,
        },
    )
}

/// Exponential moving average update; the variance uses the unbiased estimate.
pub fn update_running<T: Real>(mean: &mut [T], var: &mut [T], saved: &BnSaved<T>, momentum: f64, count: usize) {
    let unbias = if count > 1 {
        count as f64 / (count - 1) as f64
    } else {
        1.0
    };
    for c in 0..mean.len() {
        let m = mean[c].to_f64() * (1.0 - momentum) + saved.mean[c].to_f64() * momentum;
        let v = var[c].to_f64() * (1.0 - momentum) + saved.var[c].to_f64() * unbias * momentum;
        mean[c] = T::from_f64(m);
        var[c] = T::from_f64(v.max(0.0));
    }
}

/// Returns (grad_input, grad_gamma, grad_beta).
pub fn bn_backward<T: Real>(
    grad_out: &Tensor5<T>,
    x: &Tensor5<T>,
    gamma: &[T],
    saved: &BnSaved<T>,
) -> (Tensor5<T>, Vec<T>, Vec<T>) {
    let s = x.shape();
    let count = (s.n * s.spatial()) as f64;
    // per channel: sum(dy), sum(dy * xhat)
    let sums = par::map_range(s.c, |c| {
        let (m, is) = (saved.mean[c].to_f64(), saved.inv_std[c].to_f64());
        let (mut sd, mut sdx) = (0.0f64, 0.0f64);
        for n in 0..s.n {
            for (&g, &v) in grad_out.slab(n, c).iter().zip(x.slab(n, c)) {
                let g = g.to_f64();
                sd += g;
                sdx += g * (v.to_f64() - m) * is;
            }
        }
        (sd, sdx)
    });
    let mut gx = Tensor5::zeros(s);
    par::for_each_chunk_mut(gx.data_mut(), s.spatial(), |slab, dst| {
        let (n, c) = (slab / s.c, slab % s.c);
        let g = gamma[c].to_f64();
        let is = saved.inv_std[c].to_f64();
        let go = grad_out.slab(n, c);
        match saved.mode {
            Mode::Infer => {
                let k = T::from_f64(g * is);
                for (o, &d) in dst.iter_mut().zip(go) {
                    *o = d * k;
                }
            }
            Mode::Train => {
                let (sd, sdx) = sums[c];
                let m = saved.mean[c].to_f64();
                let k = g * is / count;
                for ((o, &d), &v) in dst.iter_mut().zip(go).zip(x.slab(n, c)) {
                    let xhat = (v.to_f64() - m) * is;
                    *o = T::from_f64(k * (count * d.to_f64() - sd - xhat * sdx));
                }
            }
        }
    });
    let ggamma = sums.iter().map(|&(_, sdx)| T::from_f64(sdx)).collect();
    let gbeta = sums.iter().map(|&(sd, _)| T::from_f64(sd)).collect();
    (gx, ggamma, gbeta)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn infer_identity_statistics() {
        let x = Tensor5::<f32>::from_fn([2, 3, 2, 2, 2], |i| i as f32 - 10.0);
        let mut bn = BnState::identity(3);
        let (y, _) = bn.forward(&x, Mode::Infer).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() <= 1e-4 * b.abs().max(1.0));
        }
    }

    #[test]
    fn train_two_values() {
        let x = Tensor5::<f64>::from_vec([1, 1, 1, 1, 2], vec![1.0, 3.0]).unwrap();
        let mut bn = BnState::untracked(1);
        let (y, saved) = bn.forward(&x, Mode::Train).unwrap();
        assert_eq!(saved.mean, vec![2.0]);
        assert_eq!(saved.var, vec![1.0]);
        assert!((y.data()[0] + 1.0).abs() < 1e-4);
        assert!((y.data()[1] - 1.0).abs() < 1e-4);

        bn.gamma = vec![2.0];
        bn.beta = vec![1.0];
        let (y, _) = bn_train_forward(&x, &bn.gamma, &bn.beta, DEFAULT_BN_EPS);
        assert!((y.data()[0] + 1.0).abs() < 1e-4);
        assert!((y.data()[1] - 3.0).abs() < 1e-4);
    }

    #[test]
    fn running_stats_ema() {
        let x = Tensor5::<f64>::from_vec([1, 1, 1, 1, 2], vec![1.0, 3.0]).unwrap();
        let mut bn = BnState::identity(1);
        bn.forward(&x, Mode::Train).unwrap();
        // mean 0.9*0 + 0.1*2, var 0.9*1 + 0.1*2 (unbiased estimate of {1,3})
        assert!((bn.running_mean.as_ref().unwrap()[0] - 0.2).abs() < 1e-12);
        assert!((bn.running_var.as_ref().unwrap()[0] - 1.1).abs() < 1e-12);
    }

    #[test]
    fn infer_without_stats_rejected() {
        let x = Tensor5::<f32>::zeros([1, 2, 1, 1, 1]);
        let mut bn = BnState::untracked(2);
        assert!(matches!(bn.forward(&x, Mode::Infer), Err(Error::UninitializedStats(_))));
    }

    #[test]
    fn channel_mismatch_rejected() {
        let x = Tensor5::<f32>::zeros([1, 2, 1, 1, 1]);
        assert!(BnState::<f32>::identity(3).forward(&x, Mode::Train).is_err());
    }
}
