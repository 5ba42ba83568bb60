//! Named parameter storage and the per-pass binding context.
//!
//! A [`ParamStore`] owns every trainable tensor under a stable, insertion-
//! ordered name. Each forward pass creates a fresh [`GraphCtx`] that lazily
//! copies parameters onto its tape as gradient-bearing leaves; after
//! `backward`, [`GraphCtx::harvest`] maps tape gradients back to parameter
//! names for the optimizer.

use indexmap::IndexMap;

use crate::num::rng::SeedRng;
use crate::num::scalar::Scalar;
use crate::num::tape::{Grads, Id, NumError, Tape};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "tensor data length must match shape");
        Tensor { rows, cols, data }
    }

    /// Xavier/Glorot uniform init over `[-sqrt(6/(fan_in+fan_out)), +...]`.
    /// Draws are made in f64 and cast, so f32 and f64 stores built from the
    /// same seed hold the same values up to rounding.
    pub fn xavier(rows: usize, cols: usize, rng: &mut SeedRng) -> Self {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols).map(|_| T::of(rng.uniform(-limit, limit))).collect();
        Tensor { rows, cols, data }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// Insertion-ordered collection of named parameters. Iteration order is the
/// manifest order used by checkpoints, so it must be deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: IndexMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        let name = name.into();
        let prev = self.params.insert(name.clone(), tensor);
        assert!(prev.is_none(), "duplicate parameter name {name:?}");
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.params.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }
}

/// A tape plus lazy parameter binding for one forward/backward pass.
pub struct GraphCtx<'a, T: Scalar> {
    pub tape: Tape<T>,
    store: &'a ParamStore<T>,
    bound: IndexMap<String, Id>,
    trainable: bool,
}

impl<'a, T: Scalar> GraphCtx<'a, T> {
    /// `trainable` controls whether bound parameters request gradients;
    /// inference passes run with `false` and skip all gradient bookkeeping.
    pub fn new(store: &'a ParamStore<T>, trainable: bool) -> Self {
        GraphCtx { tape: Tape::new(), store, bound: IndexMap::new(), trainable }
    }

    /// Bind a named parameter onto the tape (once; later calls return the
    /// same leaf so gradient contributions from shared uses accumulate).
    pub fn param(&mut self, name: &str) -> Result<Id, NumError> {
        if let Some(&id) = self.bound.get(name) {
            return Ok(id);
        }
        let tensor = self.store.get(name).ok_or_else(|| NumError::InvalidShape {
            op: "param",
            detail: format!("unknown parameter {name:?}"),
        })?;
        let id = self.tape.leaf(tensor.rows, tensor.cols, tensor.data.clone(), self.trainable)?;
        self.bound.insert(name.to_string(), id);
        Ok(id)
    }

    /// Map tape gradients back to parameter names. Parameters that were
    /// never bound, or received no gradient, are absent.
    pub fn harvest(&self, grads: &Grads<T>) -> IndexMap<String, Vec<T>> {
        let mut out = IndexMap::new();
        for (name, &id) in &self.bound {
            if let Some(g) = grads.get(id) {
                out.insert(name.clone(), g.to_vec());
            }
        }
        out
    }
}
