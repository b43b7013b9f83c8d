//! Reduce-on-plateau learning-rate schedule.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct PlateauScheduler {
    pub best: Option<f64>,
    pub since_improve: usize,
    pub patience: usize,
    pub factor: f64,
    /// Relative decrease over `best` that counts as improvement.
    pub min_improvement: f64,
}

impl Default for PlateauScheduler {
    fn default() -> Self {
        PlateauScheduler {
            best: None,
            since_improve: 0,
            patience: 5,
            factor: 0.1,
            min_improvement: 1e-4,
        }
    }
}

impl PlateauScheduler {
    /// Records one validation loss and scales `lr` down when the plateau
    /// outlasts the patience. Returns whether `lr` changed.
    pub fn step(&mut self, val_loss: f64, lr: &mut f64) -> Result<bool> {
        if !val_loss.is_finite() {
            return Err(Error::NonFinite(format!("validation loss {val_loss}")));
        }
        let improved = match self.best {
            None => true,
            Some(b) => val_loss < b - b.abs() * self.min_improvement,
        };
        if improved {
            self.best = Some(val_loss);
            self.since_improve = 0;
            return Ok(false);
        }
        self.since_improve += 1;
        if self.since_improve > self.patience {
            *lr *= self.factor;
            self.since_improve = 0;
            return Ok(true);
        }
        Ok(false)
    }
}
