//! Learnable parameter registry with paired gradient accumulators.

use std::collections::HashMap;

use ndarray::Array2;
use rand::Rng;

use crate::error::{Error, Result};

/// Handle to one parameter inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// All learnable weights of a model plus their gradient accumulators.
///
/// Parameters are registered once, in a deterministic order, under unique
/// names; the registration order is also the serialization order. Gradients
/// live alongside the values and are accumulated by tape backward passes
/// until an optimizer step consumes and zeroes them.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
    grads: Vec<Array2<f64>>,
    by_name: HashMap<String, ParamId>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a parameter. Panics on duplicate names: they are always a
    /// construction bug, never a runtime condition.
    pub fn register(&mut self, name: impl Into<String>, value: Array2<f64>) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name:?}"
        );
        let id = ParamId(self.values.len());
        let grad = Array2::zeros(value.raw_dim());
        self.names.push(name.clone());
        self.values.push(value);
        self.grads.push(grad);
        self.by_name.insert(name, id);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn value(&self, id: ParamId) -> &Array2<f64> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Array2<f64> {
        &self.grads[id.0]
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.grads[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Total scalar parameter count.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Add a per-parameter gradient map (from one tape backward) into the
    /// accumulators.
    pub fn accumulate(&mut self, grads: Vec<Option<Array2<f64>>>) {
        for (i, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                self.grads[i] += &g;
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.fill(0.0);
        }
    }

    pub fn scale_grads(&mut self, s: f64) {
        for g in &mut self.grads {
            *g *= s;
        }
    }

    /// Euclidean norm over every gradient entry.
    pub fn grad_global_norm(&self) -> f64 {
        self.grads
            .iter()
            .map(|g| g.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Scale gradients so their global norm is at most `max_norm`.
    pub fn clip_grad_norm(&mut self, max_norm: f64) {
        let norm = self.grad_global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale_grads(max_norm / norm);
        }
    }

    /// First parameter whose gradient contains a non-finite entry, if any.
    pub fn find_nonfinite_grad(&self) -> Option<&str> {
        for (i, g) in self.grads.iter().enumerate() {
            if g.iter().any(|x| !x.is_finite()) {
                return Some(&self.names[i]);
            }
        }
        None
    }

    /// All values finite; used as a checkpoint-load sanity check.
    pub fn check_finite_values(&self) -> Result<()> {
        for (i, v) in self.values.iter().enumerate() {
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Validation(format!(
                    "parameter {} contains non-finite values",
                    self.names[i]
                )));
            }
        }
        Ok(())
    }

    /// Round every value to the nearest f32. Training keeps parameters on the
    /// f32 grid so that checkpoints (which store f32) round-trip bit-exactly.
    pub fn quantize_values_f32(&mut self) {
        for v in &mut self.values {
            v.mapv_inplace(crate::util::quantize_f32);
        }
    }
}

/// Weight matrix of shape (fan_in, fan_out), entries uniform in ±1/sqrt(fan_in).
pub fn init_linear<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Array2<f64> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Array2::from_shape_fn((fan_in, fan_out), |_| rng.gen_range(-bound..bound))
}

/// Embedding table of shape (vocab, dim), entries uniform in ±1/sqrt(dim).
pub fn init_embedding<R: Rng>(rng: &mut R, vocab: usize, dim: usize) -> Array2<f64> {
    let bound = 1.0 / (dim.max(1) as f64).sqrt();
    Array2::from_shape_fn((vocab, dim), |_| rng.gen_range(-bound..bound))
}

pub fn zeros(rows: usize, cols: usize) -> Array2<f64> {
    Array2::zeros((rows, cols))
}

pub fn ones_row(dim: usize) -> Array2<f64> {
    Array2::ones((1, dim))
}
