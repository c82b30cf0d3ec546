//! Named parameter arrays and their binding onto a tape.

use std::collections::HashMap;

use crate::error::{Error, Result};

use super::tape::{Gradients, Tape, Var};

/// One named, shaped, flat array of reals.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Flat named parameter arrays with a deterministic iteration order
/// (insertion order). Names are unique; shapes are fixed at creation.
#[derive(Debug, Clone, Default)]
pub struct ParameterStore {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, usize>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>) -> Result<()> {
        if self.by_name.contains_key(name) {
            return Err(Error::InvalidParam(format!("duplicate parameter name {name:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "{name:?}: shape {shape:?} holds {numel} values, got {}",
                data.len()
            )));
        }
        self.by_name.insert(name.to_string(), self.entries.len());
        self.entries.push(ParamEntry { name: name.to_string(), shape, data });
        Ok(())
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.by_name.get(name).map(|&i| &self.entries[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamEntry> {
        self.by_name.get(name).copied().map(move |i| &mut self.entries[i])
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn entry(&self, idx: usize) -> &ParamEntry {
        &self.entries[idx]
    }

    pub fn entry_mut(&mut self, idx: usize) -> &mut ParamEntry {
        &mut self.entries[idx]
    }

    pub fn num_entries(&self) -> usize {
        self.entries.len()
    }

    pub fn num_params(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }

    /// Allocates zeroed buffers shaped like the parameters, e.g. for
    /// gradient accumulation or optimizer moments.
    pub fn zeros_like(&self) -> Vec<Vec<f64>> {
        self.entries.iter().map(|e| vec![0.0; e.data.len()]).collect()
    }
}

/// Leaf positions of a [`ParameterStore`] bound onto a tape, letting model
/// code address parameter scalars as [`Var`]s.
#[derive(Debug, Clone)]
pub struct ParamBinding {
    /// First leaf id per store entry, in entry order.
    offsets: Vec<u32>,
}

impl ParamBinding {
    /// Pushes one leaf per parameter value. Call once per tape, before the
    /// first [`Tape::mark`] that per-sample work rewinds to.
    pub fn bind(tape: &mut Tape, store: &ParameterStore) -> Self {
        let mut offsets = Vec::with_capacity(store.num_entries());
        for e in store.entries() {
            let first = tape.len() as u32;
            offsets.push(first);
            for &v in &e.data {
                tape.leaf(v);
            }
        }
        Self { offsets }
    }

    /// Writes current store values back into the bound leaves, after an
    /// optimizer step.
    pub fn refresh(&self, tape: &mut Tape, store: &ParameterStore) {
        for (entry, &off) in store.entries().iter().zip(&self.offsets) {
            for (i, &v) in entry.data.iter().enumerate() {
                tape.set_leaf(Var(off + i as u32), v);
            }
        }
    }

    /// The tape var of element `i` of entry `entry_idx`.
    pub fn var(&self, entry_idx: usize, i: usize) -> Var {
        Var(self.offsets[entry_idx] + i as u32)
    }

    /// Extracts parameter gradients from a sweep, shaped like the store and
    /// in store order.
    pub fn gradients(&self, grads: &Gradients, store: &ParameterStore) -> Vec<Vec<f64>> {
        let mut out = store.zeros_like();
        self.add_scaled(grads.as_slice(), store, &mut out, 1.0);
        out
    }

    /// Adds `scale * grad` into `accum` (shaped like the store).
    pub fn add_scaled(&self, flat: &[f64], store: &ParameterStore, accum: &mut [Vec<f64>], scale: f64) {
        for (k, (entry, &off)) in store.entries().iter().zip(&self.offsets).enumerate() {
            let buf = &mut accum[k];
            for i in 0..entry.data.len() {
                buf[i] += scale * flat[off as usize + i];
            }
        }
    }
}
