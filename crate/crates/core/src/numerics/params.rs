//! Named trainable tensors with gradient accumulators and optimizer moments.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::scalar::Scalar;
use super::tensor::Tensor;
use super::NumericsError;

/// Handle to one named tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub(crate) struct ParamEntry<S> {
    pub name: String,
    pub value: Tensor<S>,
    pub grad: Vec<S>,
    moment1: Vec<S>,
    moment2: Vec<S>,
}

/// Owns every trainable tensor of one model run, plus per-tensor gradient
/// accumulators and adaptive-moment state. Entries keep insertion order, so
/// iteration is deterministic.
#[derive(Debug, Clone)]
pub struct ParamStore<S> {
    entries: Vec<ParamEntry<S>>,
    by_name: HashMap<String, usize>,
    step: u64,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self { entries: Vec::new(), by_name: HashMap::new(), step: 0 }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<S>) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name:?}"
        );
        let len = value.len();
        let id = self.entries.len();
        self.by_name.insert(name.clone(), id);
        self.entries.push(ParamEntry {
            name,
            value,
            grad: vec![S::ZERO; len],
            moment1: vec![S::ZERO; len],
            moment2: vec![S::ZERO; len],
        });
        ParamId(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor<S> {
        &self.entries[id.0].value
    }

    /// Replaces a parameter tensor; the new value must keep the shape.
    pub fn set_value(&mut self, id: ParamId, value: Tensor<S>) {
        let entry = &mut self.entries[id.0];
        assert_eq!(entry.value.shape(), value.shape(), "parameter shape is fixed");
        entry.value = value;
    }

    /// Pokes one coordinate; used by finite-difference probes.
    pub fn nudge(&mut self, id: ParamId, index: usize, value: S) {
        self.entries[id.0].value.data_mut()[index] = value;
    }

    pub fn grad(&self, id: ParamId) -> &[S] {
        &self.entries[id.0].grad
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, delta: &[S]) {
        let grad = &mut self.entries[id.0].grad;
        debug_assert_eq!(grad.len(), delta.len());
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += *d;
        }
    }

    pub fn zero_grads(&mut self) {
        for entry in &mut self.entries {
            entry.grad.fill(S::ZERO);
        }
    }

    pub fn num_params(&self) -> usize {
        self.entries.len()
    }

    /// Total number of scalar coordinates across all parameters.
    pub fn num_coordinates(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    /// One adaptive-moment update with bias correction. Moment arithmetic
    /// runs in f64 regardless of the training precision. Tensors update
    /// independently (in parallel off-wasm; order cannot affect results).
    /// Gradients are left untouched; the caller zeroes them.
    pub fn adam_step(&mut self, settings: &AdamSettings) {
        self.step += 1;
        let t = self.step as i32;
        let correction1 = 1.0 - settings.beta1.powi(t);
        let correction2 = 1.0 - settings.beta2.powi(t);
        let update_entry = |entry: &mut ParamEntry<S>| {
            let values = entry.value.data_mut();
            for i in 0..values.len() {
                let g = entry.grad[i].to_f64();
                let m =
                    settings.beta1 * entry.moment1[i].to_f64() + (1.0 - settings.beta1) * g;
                let v = settings.beta2 * entry.moment2[i].to_f64()
                    + (1.0 - settings.beta2) * g * g;
                entry.moment1[i] = S::from_f64(m);
                entry.moment2[i] = S::from_f64(v);
                let update =
                    settings.lr * (m / correction1) / ((v / correction2).sqrt() + settings.eps);
                values[i] = S::from_f64(values[i].to_f64() - update);
            }
        };
        #[cfg(not(target_arch = "wasm32"))]
        {
            use rayon::prelude::*;
            self.entries.par_iter_mut().for_each(update_entry);
        }
        #[cfg(target_arch = "wasm32")]
        self.entries.iter_mut().for_each(update_entry);
    }

    /// Exact snapshot of names, shapes, and bit patterns.
    pub fn snapshot(&self) -> StoreSnapshot {
        StoreSnapshot {
            scalar: S::TAG.to_string(),
            step: self.step,
            tensors: self
                .entries
                .iter()
                .map(|e| TensorSnapshot {
                    name: e.name.clone(),
                    shape: [e.value.rows(), e.value.cols()],
                    data: e.value.data().iter().map(|v| v.to_bit_hex()).collect::<String>(),
                })
                .collect(),
        }
    }

    /// Rebuilds a store from a snapshot, bit-exactly. Optimizer moments are
    /// not part of checkpoints and come back zeroed.
    pub fn from_snapshot(snapshot: &StoreSnapshot) -> Result<Self, NumericsError> {
        if snapshot.scalar != S::TAG {
            return Err(NumericsError::PrecisionMismatch {
                expected: S::TAG,
                found: snapshot.scalar.clone(),
            });
        }
        let mut store = Self::new();
        for tensor in &snapshot.tensors {
            let [rows, cols] = tensor.shape;
            let expected = rows * cols * S::HEX_WIDTH;
            if tensor.data.len() != expected {
                return Err(NumericsError::MalformedSnapshot { name: tensor.name.clone() });
            }
            let mut data = Vec::with_capacity(rows * cols);
            for i in 0..rows * cols {
                let hex = &tensor.data[i * S::HEX_WIDTH..(i + 1) * S::HEX_WIDTH];
                let value = S::from_bit_hex(hex)
                    .ok_or_else(|| NumericsError::MalformedSnapshot { name: tensor.name.clone() })?;
                data.push(value);
            }
            store.insert(tensor.name.clone(), Tensor::from_vec(rows, cols, data));
        }
        store.step = snapshot.step;
        Ok(store)
    }
}

/// Optimizer hyperparameters with the conventional defaults.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamSettings {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamSettings {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Serializable image of a [`ParamStore`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreSnapshot {
    pub scalar: String,
    pub step: u64,
    pub tensors: Vec<TensorSnapshot>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSnapshot {
    pub name: String,
    pub shape: [usize; 2],
    /// Concatenated per-element bit patterns, fixed width per scalar type.
    pub data: String,
}
