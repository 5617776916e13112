//! Named parameter storage shared across graphs.
//!
//! Parameters live outside any single tape so that gradients can accumulate
//! over several forward/backward passes (micro-batching) before an optimizer
//! step. A `BTreeMap` keeps iteration order stable, which in turn keeps
//! optimizer updates and checkpoints deterministic.

use std::collections::BTreeMap;

use crate::error::AutodiffError;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Parameter {
    pub value: Tensor,
    /// `None` until a gradient has been exported; reset by `zero_grads`.
    pub grad: Option<Tensor>,
}

#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: BTreeMap<String, Parameter>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    /// Registers a parameter, replacing any previous tensor under the name.
    pub fn insert(&mut self, name: &str, value: Tensor) {
        self.entries.insert(name.to_string(), Parameter { value, grad: None });
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

    pub fn value(&self, name: &str) -> Result<&Tensor, AutodiffError> {
        self.entries
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| AutodiffError::UnknownParam(name.to_string()))
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor, AutodiffError> {
        self.entries
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| AutodiffError::UnknownParam(name.to_string()))
    }

    pub fn grad(&self, name: &str) -> Result<Option<&Tensor>, AutodiffError> {
        self.entries
            .get(name)
            .map(|p| p.grad.as_ref())
            .ok_or_else(|| AutodiffError::UnknownParam(name.to_string()))
    }

    /// Adds `g` into the stored gradient, allocating zeros on first use.
    pub fn accumulate_grad(&mut self, name: &str, g: &Tensor) -> Result<(), AutodiffError> {
        let p = self
            .entries
            .get_mut(name)
            .ok_or_else(|| AutodiffError::UnknownParam(name.to_string()))?;
        if g.shape() != p.value.shape() {
            return Err(AutodiffError::ShapeMismatch {
                op: "accumulate_grad",
                details: format!("param {:?}, grad {:?}", p.value.shape(), g.shape()),
            });
        }
        match &mut p.grad {
            Some(existing) => existing.add_assign(g)?,
            None => p.grad = Some(g.clone()),
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in self.entries.values_mut() {
            p.grad = None;
        }
    }

    /// Names in sorted order — the canonical iteration order everywhere.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Parameter)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Parameter)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|p| p.value.numel()).sum()
    }

    /// Sets every stored gradient to zero tensors (in contrast to
    /// `zero_grads`, which clears them to "not yet computed").
    pub fn ensure_zero_grads(&mut self) {
        for p in self.entries.values_mut() {
            p.grad = Some(Tensor::zeros(p.value.shape()));
        }
    }
}
