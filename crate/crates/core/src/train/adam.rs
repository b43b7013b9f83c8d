//! Bias-corrected Adam.

use crate::error::{Error, Result};
use crate::network::{OptimizerSnapshot, ParamStore};
use crate::tensor::{Real, Tensor5};

pub const DEFAULT_LR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T: Real = f32> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<(String, Tensor5<T>)>,
    v: Vec<(String, Tensor5<T>)>,
}

impl<T: Real> Adam<T> {
    /// Zero moments shaped like every trainable tensor of `params`.
    pub fn new(params: &ParamStore<T>, lr: f64) -> Self {
        let zeros: Vec<_> = params
            .trainable()
            .map(|(k, t)| (k.to_string(), Tensor5::zeros(t.shape())))
            .collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn moments(&self) -> (&[(String, Tensor5<T>)], &[(String, Tensor5<T>)]) {
        (&self.m, &self.v)
    }

    /// One update. `grads` must hold a gradient for every trainable tensor,
    /// keyed by name, in any order.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[(String, Tensor5<T>)]) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::InvalidArgument(format!("learning rate {} must be positive", self.lr)));
        }
        if grads.len() != self.m.len() {
            return Err(Error::shape("adam gradients", grads.len(), self.m.len()));
        }
        let lookup: std::collections::HashMap<&str, &Tensor5<T>> =
            grads.iter().map(|(k, g)| (k.as_str(), g)).collect();
        for (name, m) in &self.m {
            let g = lookup.get(name.as_str()).ok_or_else(|| Error::MissingParam(format!("gradient for {name}")))?;
            if g.shape() != m.shape() {
                return Err(Error::shape("adam gradient", (name, g.shape()), m.shape()));
            }
        }

        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for ((name, m), (_, v)) in self.m.iter_mut().zip(self.v.iter_mut()) {
            let g = lookup[name.as_str()];
            let p = params.get_mut(name)?;
            for (((p, m), v), &g) in p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
                let g = g.to_f64();
                let mn = b1 * m.to_f64() + (1.0 - b1) * g;
                let vn = b2 * v.to_f64() + (1.0 - b2) * g * g;
                *m = T::from_f64(mn);
                *v = T::from_f64(vn);
                let upd = self.lr * (mn / c1) / ((vn / c2).sqrt() + self.eps);
                *p = T::from_f64(p.to_f64() - upd);
            }
        }
        Ok(())
    }
}

impl Adam<f32> {
    pub fn snapshot(&self) -> OptimizerSnapshot {
        OptimizerSnapshot {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            t: self.t,
            m: self.m.clone(),
            v: self.v.clone(),
        }
    }

    pub fn restore(params: &ParamStore<f32>, s: &OptimizerSnapshot) -> Result<Self> {
        let mut a = Adam::new(params, s.lr);
        if s.m.len() != a.m.len() || s.v.len() != a.v.len() {
            return Err(Error::Checkpoint("optimizer moments do not cover the parameters".into()));
        }
        for ((want, _), (got, _)) in a.m.iter().zip(&s.m).chain(a.v.iter().zip(&s.v)) {
            if want != got {
                return Err(Error::Checkpoint(format!("moment '{got}' where '{want}' expected")));
            }
        }
        a.beta1 = s.beta1;
        a.beta2 = s.beta2;
        a.eps = s.eps;
        a.t = s.t;
        a.m = s.m.clone();
        a.v = s.v.clone();
        Ok(a)
    }
}
