//! Gradient-weighted activation maps at the bottleneck.

use crate::error::{Error, Result};
use crate::ops::{self, Mode};
use crate::tape::Tape;
use crate::tensor::{Real, Tensor5};

use super::model::Network;
use super::params::ParamStore;

/// Heat map of shape (n, 1, d, h, w) with values in [0, 1].
///
/// The backward seed is d(sum of sigmoid(logits))/d(logits). Channel weights
/// are the spatial means of the bottleneck gradient; the weighted channel sum
/// is rectified, upsampled x8 trilinearly and min-max normalized per item.
pub fn grad_cam<T: Real>(net: &Network, params: &ParamStore<T>, input: &Tensor5<T>) -> Result<Tensor5<T>> {
    if !net.config().capture_bottleneck {
        return Err(Error::InvalidConfig(
            "grad-cam needs bottleneck capture enabled in the model config".into(),
        ));
    }
    net.check_input(input.shape())?;
    let mut tape = Tape::new();
    let x = tape.leaf_ref(input);
    let out = net.forward(&mut tape, params, x, Mode::Infer)?;
    let seed = tape.value(out.logits).map(|z| {
        let s = ops::sigmoid_scalar(z);
        s * (T::ONE - s)
    });
    let grads = tape.backward(out.logits, seed, &[out.bottleneck])?;
    let acts = tape.value(out.bottleneck);
    let ga = grads
        .get(out.bottleneck)
        .ok_or_else(|| Error::InvalidArgument("no gradient reached the bottleneck".into()))?;

    let s = acts.shape();
    let spatial = s.spatial();
    let mut cam = Tensor5::<T>::zeros(s.with_channels(1));
    for n in 0..s.n {
        let dst = &mut cam.data_mut()[n * spatial..(n + 1) * spatial];
        for c in 0..s.c {
            let g = ga.slab(n, c);
            let alpha = g.iter().map(|v| v.to_f64()).sum::<f64>() / spatial as f64;
            let alpha = T::from_f64(alpha);
            for (d, &a) in dst.iter_mut().zip(acts.slab(n, c)) {
                *d += alpha * a;
            }
        }
        for v in dst.iter_mut() {
            *v = v.max(T::ZERO);
        }
    }

    let mut up = cam;
    for _ in 0..3 {
        up = ops::trilinear_upsample2(&up);
    }
    let item = up.shape().spatial();
    for chunk in up.data_mut().chunks_mut(item) {
        normalize_min_max(chunk);
    }
    Ok(up)
}

/// Maps `v` onto [0, 1]. A constant slice maps to all ones if positive,
/// otherwise to all zeros.
pub fn normalize_min_max<T: Real>(v: &mut [T]) {
    let (lo, hi) = v
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x.to_f64()), hi.max(x.to_f64())));
    if !(hi > lo) {
        let fill = if hi > 0.0 { T::ONE } else { T::ZERO };
        v.iter_mut().for_each(|x| *x = fill);
        return;
    }
    let span = hi - lo;
    for x in v.iter_mut() {
        *x = T::from_f64(((x.to_f64() - lo) / span).clamp(0.0, 1.0));
    }
}
