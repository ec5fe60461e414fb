use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{ClassRecord, Dataset, Split};
use crate::error::{Error, Result};

/// Isotropic Gaussian task family: class centers ~ N(0, center_scale² I),
/// samples ~ N(center, within_scale² I).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthFamilyConfig {
    pub dim: usize,
    pub center_scale: f64,
    pub within_scale: f64,
    pub train_classes: usize,
    pub val_classes: usize,
    pub test_classes: usize,
    pub samples_per_class: usize,
    pub seed: u64,
}

impl Default for SynthFamilyConfig {
    fn default() -> Self {
        SynthFamilyConfig {
            dim: 8,
            center_scale: 1.0,
            within_scale: 1.0,
            train_classes: 64,
            val_classes: 16,
            test_classes: 20,
            samples_per_class: 25,
            seed: 0,
        }
    }
}

impl SynthFamilyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.samples_per_class == 0 {
            return Err(Error::Config("synthetic family needs dim ≥ 1 and samples ≥ 1".into()));
        }
        if !(self.center_scale > 0.0 && self.center_scale.is_finite()) {
            return Err(Error::Config(format!("center_scale must be positive, got {}", self.center_scale)));
        }
        if !(self.within_scale >= 0.0 && self.within_scale.is_finite()) {
            return Err(Error::Config(format!("within_scale must be non-negative, got {}", self.within_scale)));
        }
        Ok(())
    }
}

pub fn synth_family(cfg: &SynthFamilyConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let splits = [
        (Split::Train, cfg.train_classes),
        (Split::Val, cfg.val_classes),
        (Split::Test, cfg.test_classes),
    ];
    let mut classes = Vec::new();
    for (split, count) in splits {
        for _ in 0..count {
            let center: Vec<f64> = (0..cfg.dim)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    cfg.center_scale * z
                })
                .collect();
            let mut data = Vec::with_capacity(cfg.dim * cfg.samples_per_class);
            for _ in 0..cfg.samples_per_class {
                for &c in &center {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    data.push((c + cfg.within_scale * z) as f32);
                }
            }
            classes.push(ClassRecord::new(classes.len(), split, cfg.dim, data)?);
        }
    }
    Dataset::new(vec![cfg.dim], classes)
}
