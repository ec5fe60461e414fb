use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Real;

/// Variance floor inside batch normalization.
pub const BN_EPS: f64 = 1e-5;
/// Fraction of the old running statistic kept on each update.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BnMode {
    Train,
    Eval,
}

/// Per-channel statistics of one training batch (biased variance).
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Running mean/variance used by batch norm in eval mode.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    initialized: bool,
}

impl<T: Real> RunningStats<T> {
    /// Statistics that must see a training batch before eval mode can use them.
    pub fn uninitialized(channels: usize) -> Self {
        RunningStats {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
            initialized: false,
        }
    }

    /// Zero mean, unit variance; usable in eval mode immediately.
    pub fn identity(channels: usize) -> Self {
        RunningStats {
            initialized: true,
            ..Self::uninitialized(channels)
        }
    }

    pub fn from_parts(mean: Vec<T>, var: Vec<T>, initialized: bool) -> Result<Self> {
        if mean.len() != var.len() {
            return Err(Error::dim(format!(
                "running stats: {} means vs {} variances",
                mean.len(),
                var.len()
            )));
        }
        Ok(RunningStats { mean, var, initialized })
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    /// Exponential moving average with [`BN_MOMENTUM`]; the first batch seen by
    /// uninitialized statistics is copied verbatim.
    pub fn update(&mut self, batch: &BatchStats<T>) -> Result<()> {
        if batch.mean.len() != self.channels() {
            return Err(Error::dim(format!(
                "running stats have {} channels, batch has {}",
                self.channels(),
                batch.mean.len()
            )));
        }
        if !self.initialized {
            self.mean.clone_from(&batch.mean);
            self.var.clone_from(&batch.var);
            self.initialized = true;
            return Ok(());
        }
        let keep = T::lit(BN_MOMENTUM);
        let take = T::one() - keep;
        for (r, &b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = keep * *r + take * b;
        }
        for (r, &b) in self.var.iter_mut().zip(&batch.var) {
            *r = keep * *r + take * b;
        }
        Ok(())
    }
}
