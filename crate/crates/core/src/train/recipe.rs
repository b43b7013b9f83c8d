//! The fixed desk-scale phantom benchmark: which phantoms to train,
//! validate and test on, and how.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::network::{Checkpoint, DilationPreset, ModelConfig, Network};
use crate::pipeline::NetworkModel;

use super::evaluate::{evaluate_case, Predictor};
use super::phantom::{phantom_set, Phantom, PhantomSpec};
use super::sampler::TrainCase;
use super::trainer::{train, EpochRecord, TrainConfig, TrainOutcome};

/// `count` consecutive phantom seeds starting at `first`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedRange {
    pub first: u64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeskRecipe {
    pub train: TrainConfig,
    pub phantom: PhantomSpec,
    pub train_set: SeedRange,
    pub val_set: SeedRange,
    pub test_set: SeedRange,
    pub threshold: f64,
}

impl Default for DeskRecipe {
    fn default() -> Self {
        DeskRecipe {
            train: TrainConfig {
                model: ModelConfig {
                    patch_shape: [32, 32, 32],
                    ..ModelConfig::tiny()
                },
                epochs: 10,
                steps_per_epoch: 40,
                batch_size: 4,
                lr: 5e-3,
                seed: 42,
                ..TrainConfig::default()
            },
            phantom: PhantomSpec::default(),
            train_set: SeedRange { first: 1000, count: 16 },
            val_set: SeedRange { first: 2000, count: 4 },
            test_set: SeedRange { first: 3000, count: 6 },
            threshold: 0.5,
        }
    }
}

pub struct DeskRun {
    pub outcome: TrainOutcome,
    /// Dice of the best checkpoint on each test phantom, in seed order.
    pub test_dice: Vec<f64>,
    pub train_seconds: f64,
}

impl DeskRun {
    pub fn mean_dice(&self) -> f64 {
        self.test_dice.iter().sum::<f64>() / self.test_dice.len().max(1) as f64
    }
}

impl DeskRecipe {
    pub fn with_preset(mut self, preset: DilationPreset) -> Self {
        self.train.model = self.train.model.with_preset(preset);
        self
    }

    pub fn phantoms(&self, set: SeedRange) -> Result<Vec<Phantom>> {
        phantom_set(&self.phantom, set.first, set.count)
    }

    pub fn cases(&self, set: SeedRange) -> Result<Vec<TrainCase>> {
        let patch = self.train.model.patch_shape;
        self.phantoms(set)?
            .iter()
            .map(|p| TrainCase::new(&p.volume, &p.mask, patch))
            .collect()
    }

    /// Dice of `ckpt` on every test phantom.
    pub fn test_dice(&self, ckpt: &Checkpoint) -> Result<Vec<f64>> {
        let net = Network::new(ckpt.config.clone())?;
        let model = NetworkModel {
            net: &net,
            params: &ckpt.params,
        };
        self.phantoms(self.test_set)?
            .iter()
            .map(|p| Ok(evaluate_case(&Predictor::Model(&model), &p.volume, &p.mask, self.threshold)?.dice))
            .collect()
    }

    pub fn run(&self, on_epoch: impl FnMut(&EpochRecord, &Checkpoint, bool) -> Result<()>) -> Result<DeskRun> {
        let train_cases = self.cases(self.train_set)?;
        let val_cases = self.cases(self.val_set)?;
        let started = Instant::now();
        let outcome = train(&self.train, &train_cases, &val_cases, on_epoch)?;
        let train_seconds = started.elapsed().as_secs_f64();
        let test_dice = self.test_dice(&outcome.best)?;
        Ok(DeskRun {
            outcome,
            test_dice,
            train_seconds,
        })
    }
}
