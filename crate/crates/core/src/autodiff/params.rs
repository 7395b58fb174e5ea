//! Named learnable parameters and their gradient accumulators.

use std::collections::HashMap;

use rand::Rng;

use super::tensor::Tensor;
use crate::{Error, Result};

/// Index of a parameter within its [`ParamStore`]. Stable for the lifetime
/// of the store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// A learnable tensor with a same-shaped gradient accumulator.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Insertion-ordered collection of parameters. Names are unique; iteration
/// order is registration order, which fixes checkpoint layout and optimizer
/// state alignment.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter name {name:?}")));
        }
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.rows, value.cols);
        self.params.push(Parameter { name: name.clone(), value, grad });
        self.by_name.insert(name, id);
        Ok(id)
    }

    /// Register a (rows, cols) parameter with Xavier-uniform entries,
    /// bound sqrt(6 / (rows + cols)).
    pub fn add_xavier(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        rng: &mut impl Rng,
    ) -> Result<ParamId> {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
        self.add(name, Tensor { rows, cols, data })
    }

    pub fn add_zeros(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
    ) -> Result<ParamId> {
        self.add(name, Tensor::zeros(rows, cols))
    }

    pub fn add_filled(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        v: f64,
    ) -> Result<ParamId> {
        self.add(name, Tensor::filled(rows, cols, v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    /// Parameters in registration order.
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data.fill(0.0);
        }
    }

    /// Add a gradient map's contributions into the parameter accumulators.
    pub fn accumulate(&mut self, grads: &GradMap) {
        debug_assert_eq!(grads.grads.len(), self.params.len());
        for (p, g) in self.params.iter_mut().zip(grads.grads.iter()) {
            if let Some(g) = g {
                p.grad.add_assign(g);
            }
        }
    }

    pub fn total_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// Per-parameter gradients from one backward pass. Parameters the loss never
/// touched stay `None`, which reads as an all-zero contribution.
#[derive(Debug, Clone)]
pub struct GradMap {
    grads: Vec<Option<Tensor>>,
}

impl GradMap {
    pub fn new(store: &ParamStore) -> Self {
        GradMap { grads: vec![None; store.len()] }
    }

    pub fn add(&mut self, id: ParamId, delta: &Tensor) {
        match &mut self.grads[id.0] {
            Some(t) => t.add_assign(delta),
            slot => *slot = Some(delta.clone()),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    /// Sum another map into this one. Both must come from the same store.
    pub fn merge(&mut self, other: &GradMap) {
        debug_assert_eq!(self.grads.len(), other.grads.len());
        for (a, b) in self.grads.iter_mut().zip(other.grads.iter()) {
            if let Some(b) = b {
                match a {
                    Some(a) => a.add_assign(b),
                    slot => *slot = Some(b.clone()),
                }
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().all(|t| t.all_finite())
    }
}
