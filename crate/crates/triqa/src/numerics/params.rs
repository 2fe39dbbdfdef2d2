//! Named parameter storage shared between tapes, the optimizer, and
//! checkpoint code.

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};
use rand::Rng;
use std::collections::BTreeMap;
use std::sync::Arc;

/// One named tensor. Non-trainable entries (running statistics) are stored
/// and checkpointed but receive no gradient and are skipped by the
/// optimizer.
#[derive(Debug, Clone)]
pub struct Parameter<S> {
    pub tensor: Arc<Tensor<S>>,
    pub trainable: bool,
}

/// Ordered map of parameters; iteration order is the name order, which keeps
/// optimizer updates and checkpoints deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamSet<S> {
    entries: BTreeMap<String, Parameter<S>>,
}

impl<S: Scalar> ParamSet<S> {
    pub fn new() -> Self {
        ParamSet {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor<S>, trainable: bool) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name: {name}")));
        }
        self.entries.insert(
            name.to_string(),
            Parameter {
                tensor: Arc::new(tensor),
                trainable,
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Parameter<S>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter: {name}")))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<S>> {
        Ok(self.get(name)?.tensor.as_ref())
    }

    /// Replace the tensor behind `name`, keeping its trainable flag. The
    /// shape must not change.
    pub fn set_tensor(&mut self, name: &str, tensor: Tensor<S>) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter: {name}")))?;
        if entry.tensor.shape() != tensor.shape() {
            return Err(Error::Shape(format!(
                "parameter {name}: cannot replace shape {:?} with {:?}",
                entry.tensor.shape(),
                tensor.shape()
            )));
        }
        entry.tensor = Arc::new(tensor);
        Ok(())
    }

    /// In-place update helper for the optimizer: clones the storage only if
    /// another tape still holds a reference.
    pub fn update<F: FnOnce(&mut Tensor<S>)>(&mut self, name: &str, f: F) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter: {name}")))?;
        let t = Arc::make_mut(&mut entry.tensor);
        f(t);
        Ok(())
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

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Parameter<S>)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    /// Total number of trainable scalars.
    pub fn trainable_numel(&self) -> usize {
        self.entries
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.tensor.numel())
            .sum()
    }

    /// Insert a trainable tensor drawn uniformly from `[-bound, bound)`.
    pub fn insert_uniform<R: Rng>(
        &mut self,
        name: &str,
        shape: &[usize],
        bound: f64,
        rng: &mut R,
    ) -> Result<()> {
        let t = Tensor::uniform(shape, S::from_f64c(bound), rng);
        self.insert(name, t, true)
    }

    /// Glorot-style uniform init with `bound = sqrt(6 / (fan_in + fan_out))`.
    pub fn insert_glorot<R: Rng>(
        &mut self,
        name: &str,
        shape: &[usize],
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<()> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        self.insert_uniform(name, shape, bound, rng)
    }

    pub fn insert_zeros(&mut self, name: &str, shape: &[usize], trainable: bool) -> Result<()> {
        self.insert(name, Tensor::zeros(shape), trainable)
    }

    pub fn insert_full(&mut self, name: &str, shape: &[usize], value: f64, trainable: bool) -> Result<()> {
        self.insert(name, Tensor::full(shape, S::from_f64c(value)), trainable)
    }

    /// Cast every tensor to another scalar type (used by the f64
    /// verification path).
    pub fn cast<T: Scalar>(&self) -> ParamSet<T> {
        let mut out = ParamSet::new();
        for (name, p) in &self.entries {
            out.entries.insert(
                name.clone(),
                Parameter {
                    tensor: Arc::new(p.tensor.cast::<T>()),
                    trainable: p.trainable,
                },
            );
        }
        out
    }

    /// Largest absolute difference across all parameters of two sets with
    /// identical names and shapes.
    pub fn max_abs_diff(&self, other: &ParamSet<S>) -> Result<f64> {
        if self.len() != other.len() {
            return Err(Error::Config(format!(
                "parameter sets differ in size: {} vs {}",
                self.len(),
                other.len()
            )));
        }
        let mut worst = 0.0f64;
        for (name, p) in &self.entries {
            let q = other.get(name)?;
            if p.tensor.shape() != q.tensor.shape() {
                return Err(Error::Shape(format!(
                    "parameter {name}: shape {:?} vs {:?}",
                    p.tensor.shape(),
                    q.tensor.shape()
                )));
            }
            for (&a, &b) in p.tensor.data().iter().zip(q.tensor.data()) {
                let d = (a.to_f64c() - b.to_f64c()).abs();
                if d > worst {
                    worst = d;
                }
            }
        }
        Ok(worst)
    }
}
