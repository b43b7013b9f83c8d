//! ReLU, residual add, sigmoid and channel concatenation.

use crate::error::{Error, Result};
use crate::tensor::{Real, Shape5, Tensor5};

pub fn relu<T: Real>(x: &Tensor5<T>) -> Tensor5<T> {
    x.map(|v| if v > T::ZERO { v } else { T::ZERO })
}

/// Masks `grad_out` where the forward output was not positive; the
/// gradient at exactly zero is zero.
pub fn relu_backward<T: Real>(grad_out: &Tensor5<T>, output: &Tensor5<T>) -> Tensor5<T> {
    let data = grad_out
        .data()
        .iter()
        .zip(output.data())
        .map(|(&g, &y)| if y > T::ZERO { g } else { T::ZERO })
        .collect();
    Tensor5::from_vec(grad_out.shape(), data).expect("shape preserved")
}

pub fn add<T: Real>(a: &Tensor5<T>, b: &Tensor5<T>) -> Result<Tensor5<T>> {
    if a.shape() != b.shape() {
        return Err(Error::shape("add", a.shape(), b.shape()));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Tensor5::from_vec(a.shape(), data)
}

#[inline]
pub fn sigmoid_scalar<T: Real>(v: T) -> T {
    if v >= T::ZERO {
        T::ONE / (T::ONE + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::ONE + e)
    }
}

pub fn sigmoid<T: Real>(x: &Tensor5<T>) -> Tensor5<T> {
    x.map(sigmoid_scalar)
}

/// Stacks channels of all `parts` in argument order.
pub fn concat_channels<T: Real>(parts: &[&Tensor5<T>]) -> Result<Tensor5<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?
        .shape();
    for p in parts {
        let s = p.shape();
        if (s.n, s.d, s.h, s.w) != (first.n, first.d, first.h, first.w) {
            return Err(Error::shape("concat_channels", first, s));
        }
    }
    let c: usize = parts.iter().map(|p| p.shape().c).sum();
    let out_shape = first.with_channels(c);
    let mut data = Vec::with_capacity(out_shape.numel());
    for n in 0..first.n {
        for p in parts {
            for ch in 0..p.shape().c {
                data.extend_from_slice(p.slab(n, ch));
            }
        }
    }
    Tensor5::from_vec(out_shape, data)
}

/// Splits a concatenated gradient back into pieces with the given channel counts.
pub fn split_channels<T: Real>(grad: &Tensor5<T>, channels: &[usize]) -> Result<Vec<Tensor5<T>>> {
    let s = grad.shape();
    if channels.iter().sum::<usize>() != s.c {
        return Err(Error::shape("split_channels", s, channels));
    }
    let mut out: Vec<Vec<T>> = channels
        .iter()
        .map(|&c| Vec::with_capacity(s.n * c * s.spatial()))
        .collect();
    for n in 0..s.n {
        let mut off = 0;
        for (i, &c) in channels.iter().enumerate() {
            for ch in off..off + c {
                out[i].extend_from_slice(grad.slab(n, ch));
            }
            off += c;
        }
    }
    out.into_iter()
        .zip(channels)
        .map(|(d, &c)| Tensor5::from_vec(Shape5 { c, ..s }, d))
        .collect()
}
