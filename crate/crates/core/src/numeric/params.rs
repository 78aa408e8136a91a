use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::{Array, Gradients, NumericError};

/// A named trainable array together with its gradient accumulator and Adam
/// moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Array,
    pub grad: Array,
    pub(crate) m: Array,
    pub(crate) v: Array,
}

/// Named parameter collection plus optimizer state.
///
/// Insertion order is preserved and defines serialization order, so two
/// stores built by the same code serialize identically.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: BTreeMap<String, usize>,
    pub(crate) step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Array) -> Result<(), NumericError> {
        if self.index.contains_key(name) {
            return Err(NumericError::DuplicateParam(name.to_string()));
        }
        let zeros = Array::zeros(value.shape());
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            grad: zeros.clone(),
            m: zeros.clone(),
            v: zeros,
            value,
        });
        Ok(())
    }

    /// Inserts a `rows x cols` matrix with entries drawn from N(0, std²).
    pub fn insert_normal<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        std: f64,
        rng: &mut R,
    ) -> Result<(), NumericError> {
        let data = if std == 0.0 {
            vec![0.0; rows * cols]
        } else {
            let normal = Normal::new(0.0, std).map_err(|e| NumericError::NonFinite(e.to_string()))?;
            (0..rows * cols).map(|_| normal.sample(rng)).collect()
        };
        self.insert(name, Array::matrix(rows, cols, data)?)
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.id(name).map(|i| &self.params[i].value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array> {
        self.id(name).map(move |i| &mut self.params[i].value)
    }

    pub fn grad(&self, name: &str) -> Option<&Array> {
        self.id(name).map(|i| &self.params[i].grad)
    }

    pub(crate) fn value_at(&self, id: usize) -> &Array {
        &self.params[id].value
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Optimizer steps taken so far.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Adds `grads` into the accumulators. Parameters the pass never reached
    /// keep their current (typically zero) accumulator.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (id, g) in grads.iter() {
            self.params[id].grad.add_assign(g);
        }
    }

    /// Same as [`accumulate`](Self::accumulate) with every entry multiplied by `scale`.
    pub fn accumulate_scaled(&mut self, grads: &Gradients, scale: f64) {
        for (id, g) in grads.iter() {
            for (a, b) in self.params[id].grad.data_mut().iter_mut().zip(g.data()) {
                *a += scale * b;
            }
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.grad.data())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.all_finite())
    }

    /// Drops optimizer moments and the step counter, keeping values.
    pub fn reset_optimizer(&mut self) {
        self.step = 0;
        for p in &mut self.params {
            p.m.data_mut().iter_mut().for_each(|x| *x = 0.0);
            p.v.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
    }

    /// Hex SHA-256 over parameter names, shapes and values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.name.as_bytes());
            for d in p.value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for x in p.value.data() {
                h.update(x.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}
