//! Embedding networks and the per-class support re-embedding.

mod class_support;
mod embedding;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub use class_support::{bypass_class_support, ClassSupportParams, DEFAULT_CHANNELS};
pub use embedding::{ArchSpec, EmbeddingParams};

/// Ordered, named parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensors<T> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Real> Default for NamedTensors<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> NamedTensors<T> {
    pub fn new() -> Self {
        NamedTensors { entries: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        self.entries.push((name.into(), tensor));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Adds every tensor to `g` as a leaf, in order.
    pub fn bind(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.entries.iter().map(|(_, t)| g.leaf(t.clone())).collect()
    }

    /// Same names and shapes, in the same order.
    pub fn same_layout(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((a, x), (b, y))| a == b && x.shape() == y.shape())
    }

    pub fn cast<U: Real>(&self) -> NamedTensors<U> {
        NamedTensors {
            entries: self.entries.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
        }
    }
}

/// He-normal initializer over a seeded ChaCha stream. Values are drawn in
/// 64-bit so both precisions start from the same point.
pub(crate) struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn he<T: Real>(&mut self, shape: Vec<usize>, fan_in: usize) -> Tensor<T> {
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::lit(normal.sample(&mut self.rng))).collect();
        Tensor::new(shape, data).expect("consistent shape")
    }
}

pub(crate) fn check_positive(what: &str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(Error::Config(format!("{what} must be at least 1")));
    }
    Ok(())
}
