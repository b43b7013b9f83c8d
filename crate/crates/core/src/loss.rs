//! Binary cross-entropy, soft Dice, and their unweighted sum.
//!
//! All reductions run in f64; gradients are returned with respect to the
//! probabilities, in the caller's precision.

use crate::error::{Error, Result};
use crate::tensor::Real;

pub const DEFAULT_SMOOTHING: f64 = 1e-5;
pub const PROB_CLAMP: f64 = 1e-7;

/// Validated probability/label pair.
#[derive(Clone, Copy, Debug)]
pub struct LossInputs<'a, T: Real> {
    probs: &'a [T],
    labels: &'a [T],
    smoothing: f64,
}

impl<'a, T: Real> LossInputs<'a, T> {
    pub fn new(probs: &'a [T], labels: &'a [T]) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidArgument("loss over zero voxels".into()));
        }
        if probs.len() != labels.len() {
            return Err(Error::shape("loss inputs", probs.len(), labels.len()));
        }
        if let Some(y) = labels.iter().find(|&&y| y != T::ZERO && y != T::ONE) {
            return Err(Error::InvalidArgument(format!("label {y} is not 0 or 1")));
        }
        if let Some(p) = probs.iter().find(|&&p| !(p >= T::ZERO && p <= T::ONE)) {
            return Err(Error::InvalidArgument(format!("probability {p} outside [0, 1]")));
        }
        Ok(LossInputs {
            probs,
            labels,
            smoothing: DEFAULT_SMOOTHING,
        })
    }

    pub fn with_smoothing(mut self, eps: f64) -> Result<Self> {
        if !(eps > 0.0) {
            return Err(Error::InvalidArgument(format!("dice smoothing {eps} must be positive")));
        }
        self.smoothing = eps;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn probs(&self) -> &'a [T] {
        self.probs
    }

    pub fn labels(&self) -> &'a [T] {
        self.labels
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossValue<T: Real> {
    pub loss: f64,
    pub grad: Vec<T>,
}

pub fn bce_loss<T: Real>(inp: &LossInputs<'_, T>) -> LossValue<T> {
    let n = inp.len() as f64;
    let mut total = 0.0;
    let grad = inp
        .probs
        .iter()
        .zip(inp.labels)
        .map(|(&p, &y)| {
            let p = p.to_f64().clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            let y = y.to_f64();
            total += y * p.ln() + (1.0 - y) * (1.0 - p).ln();
            T::from_f64(-(y / p - (1.0 - y) / (1.0 - p)) / n)
        })
        .collect();
    LossValue { loss: -total / n, grad }
}

pub fn dice_loss<T: Real>(inp: &LossInputs<'_, T>) -> LossValue<T> {
    let eps = inp.smoothing;
    let (mut inter, mut sp, mut sy) = (0.0, 0.0, 0.0);
    for (&p, &y) in inp.probs.iter().zip(inp.labels) {
        let (p, y) = (p.to_f64(), y.to_f64());
        inter += p * y;
        sp += p;
        sy += y;
    }
    let num = 2.0 * inter + eps;
    let den = sp + sy + eps;
    let grad = inp
        .labels
        .iter()
        .map(|&y| T::from_f64(-(2.0 * y.to_f64() * den - num) / (den * den)))
        .collect();
    LossValue {
        loss: 1.0 - num / den,
        grad,
    }
}

/// BCE + Dice with equal weight. The gradient is the elementwise sum of
/// the component gradients.
pub fn composite_loss<T: Real>(inp: &LossInputs<'_, T>) -> LossValue<T> {
    let b = bce_loss(inp);
    let d = dice_loss(inp);
    LossValue {
        loss: b.loss + d.loss,
        grad: b.grad.iter().zip(&d.grad).map(|(&x, &y)| x + y).collect(),
    }
}
