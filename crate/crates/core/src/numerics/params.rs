use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EntryKind {
    /// Updated by the optimizer.
    Trainable,
    /// Running statistics; written by forward passes in training mode.
    Buffer,
}

#[derive(Clone, Debug)]
pub struct Entry {
    pub name: String,
    pub kind: EntryKind,
    pub value: Tensor,
    pub frozen: bool,
}

/// Named parameter and buffer tensors of one model.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    index: BTreeMap<String, ParamId>,
}

/// Batch statistics gathered by a training-mode batch-norm node, applied to
/// the running buffers once the step is done.
#[derive(Clone, Debug)]
pub struct StatUpdate {
    pub mean_id: ParamId,
    pub var_id: ParamId,
    pub momentum: f64,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, kind: EntryKind, value: Tensor) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::config(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.entries.len());
        self.entries.push(Entry {
            name: name.to_string(),
            kind,
            value,
            frozen: false,
        });
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &Entry {
        &self.entries[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn entries(&self) -> impl Iterator<Item = (ParamId, &Entry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.entries[id.0].frozen
    }

    /// Count of trainable scalars, optionally restricted to a name prefix.
    pub fn trainable_count(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == EntryKind::Trainable && e.name.starts_with(prefix))
            .map(|e| e.value.len())
            .sum()
    }

    /// Freeze (or unfreeze) every entry whose name starts with `prefix`.
    /// Returns how many entries matched.
    pub fn set_frozen(&mut self, prefix: &str, frozen: bool) -> usize {
        let mut n = 0;
        for e in &mut self.entries {
            if e.name.starts_with(prefix) {
                e.frozen = frozen;
                n += 1;
            }
        }
        n
    }

    /// Copy all entries under `prefix` from `other`, matching by name.
    pub fn copy_prefix_from(&mut self, other: &ParamStore, prefix: &str) -> Result<usize> {
        let mut n = 0;
        for (name, &id) in self.index.range(prefix.to_string()..) {
            if !name.starts_with(prefix) {
                break;
            }
            let src = other
                .id(name)
                .ok_or_else(|| Error::config(format!("source store lacks {name}")))?;
            let src = other.get(src);
            if src.shape() != self.entries[id.0].value.shape() {
                return Err(Error::shape(format!(
                    "{name}: {:?} vs {:?}",
                    src.shape(),
                    self.entries[id.0].value.shape()
                )));
            }
            self.entries[id.0].value = src.clone();
            n += 1;
        }
        Ok(n)
    }

    pub fn apply_stat_updates(&mut self, updates: &[StatUpdate]) {
        for u in updates {
            let m = u.momentum;
            for (r, b) in self.entries[u.mean_id.0].value.data_mut().iter_mut().zip(&u.batch_mean) {
                *r = m * *r + (1.0 - m) * b;
            }
            for (r, b) in self.entries[u.var_id.0].value.data_mut().iter_mut().zip(&u.batch_var) {
                *r = (m * *r + (1.0 - m) * b).max(0.0);
            }
        }
    }

    /// Largest absolute difference between matching entries of two stores.
    pub fn max_abs_diff(&self, other: &ParamStore, prefix: &str) -> f64 {
        self.entries
            .iter()
            .filter(|e| e.name.starts_with(prefix))
            .filter_map(|e| other.id(&e.name).map(|id| e.value.max_abs_diff(other.get(id))))
            .fold(0.0, f64::max)
    }

    pub(crate) fn raw_entries(&self) -> &[Entry] {
        &self.entries
    }
}

/// Glorot-uniform initialization for a weight of given fan-in/fan-out.
pub fn glorot_uniform(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.random_range(-limit..limit))
}

pub fn uniform(shape: &[usize], limit: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-limit..limit))
}
