//! Named parameter storage.

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::ops::BnSaved;
use crate::tensor::{Real, Shape5, Tensor5};

/// What a stored tensor is, which decides initialization and trainability.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    ConvWeight { fan_in: usize },
    ConvBias,
    BnGamma,
    BnBeta,
    BnRunningMean,
    BnRunningVar,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::BnRunningMean | ParamKind::BnRunningVar)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Shape5,
    pub kind: ParamKind,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T: Real> {
    pub tensor: Tensor5<T>,
    pub kind: ParamKind,
}

/// Ordered map from layer path to tensor. Iteration order is insertion
/// order, which [`super::Network::param_specs`] fixes.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T: Real = f32> {
    entries: IndexMap<String, ParamEntry<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore {
            entries: IndexMap::new(),
        }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn insert(&mut self, name: impl Into<String>, kind: ParamKind, tensor: Tensor5<T>) {
        self.entries.insert(name.into(), ParamEntry { tensor, kind });
    }

    pub fn get(&self, name: &str) -> Result<&Tensor5<T>> {
        self.entries
            .get(name)
            .map(|e| &e.tensor)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor5<T>> {
        self.entries
            .get_mut(name)
            .map(|e| &mut e.tensor)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ParamEntry<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Trainable tensors in store order.
    pub fn trainable(&self) -> impl Iterator<Item = (&str, &Tensor5<T>)> {
        self.iter()
            .filter(|(_, e)| e.kind.trainable())
            .map(|(k, e)| (k, &e.tensor))
    }

    /// Scalar count of trainable parameters.
    pub fn param_count(&self) -> usize {
        self.trainable().map(|(_, t)| t.numel()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, e)| {
                    (
                        k.clone(),
                        ParamEntry {
                            tensor: e.tensor.cast(),
                            kind: e.kind,
                        },
                    )
                })
                .collect(),
        }
    }

    /// Folds batch statistics of one normalization layer into its running estimates.
    pub fn update_running_stats(&mut self, layer: &str, saved: &BnSaved<T>, momentum: f64, count: usize) -> Result<()> {
        let mean_key = format!("{layer}.running_mean");
        let var_key = format!("{layer}.running_var");
        let mut mean = self.get(&mean_key)?.data().to_vec();
        let mut var = self.get(&var_key)?.data().to_vec();
        crate::ops::batchnorm::update_running(&mut mean, &mut var, saved, momentum, count);
        self.get_mut(&mean_key)?.data_mut().copy_from_slice(&mean);
        self.get_mut(&var_key)?.data_mut().copy_from_slice(&var);
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(|e| e.tensor.all_finite())
    }
}

/// Builds a store from specs: He-normal conv weights (std = sqrt(2 / fan_in)),
/// zero biases, gamma = 1, beta = 0, running mean 0 and variance 1.
pub fn init_from_specs<T: Real>(specs: &[ParamSpec], seed: u64) -> ParamStore<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::default();
    for spec in specs {
        let t = match spec.kind {
            ParamKind::ConvWeight { fan_in } => {
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                Tensor5::from_fn(spec.shape, |_| T::from_f64(normal.sample(&mut rng)))
            }
            ParamKind::ConvBias | ParamKind::BnBeta | ParamKind::BnRunningMean => Tensor5::zeros(spec.shape),
            ParamKind::BnGamma | ParamKind::BnRunningVar => Tensor5::full(spec.shape, T::ONE),
        };
        store.insert(spec.name.clone(), spec.kind, t);
    }
    store
}
