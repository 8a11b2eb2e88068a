use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Named learnable tensors in insertion order.
///
/// Order is part of the contract: gradients, optimizer state and flattened
/// parameter vectors all line up by index.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterSet {
    entries: IndexMap<String, Tensor>,
}

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a tensor and returns its index. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<usize> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name {name}")));
        }
        let (idx, _) = self.entries.insert_full(name, tensor);
        Ok(idx)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.get_index_of(name)
    }

    pub fn by_index(&self, idx: usize) -> &Tensor {
        &self.entries[idx]
    }

    pub fn by_index_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.entries[idx]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    /// A parameter set with the same names and shapes, filled with zeros.
    pub fn zeros_like(&self) -> Self {
        let entries = self
            .entries
            .iter()
            .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
            .collect();
        Self { entries }
    }

    pub fn same_layout(&self, other: &ParameterSet) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(other.entries.iter())
                .all(|((ka, va), (kb, vb))| ka == kb && va.shape() == vb.shape())
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for t in self.entries.values() {
            out.extend_from_slice(t.values());
        }
        out
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_scalars() {
            return Err(Error::Contract(format!(
                "flat parameter vector has {} entries, expected {}",
                flat.len(),
                self.num_scalars()
            )));
        }
        let mut offset = 0;
        for t in self.entries.values_mut() {
            let n = t.len();
            t.values_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// `self += scale * other`, layouts must match.
    pub fn add_scaled(&mut self, other: &ParameterSet, scale: f64) {
        debug_assert!(self.same_layout(other));
        for (a, b) in self.entries.values_mut().zip(other.entries.values()) {
            for (x, y) in a.values_mut().iter_mut().zip(b.values()) {
                *x += scale * y;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(Tensor::all_finite)
    }

    /// JSON object `{name: {"shape": [...], "values": [...]}}`. Values are
    /// written with shortest round-trip formatting, which never needs more
    /// than 17 significant digits.
    pub fn to_json(&self) -> Result<String> {
        let map: IndexMap<&str, TensorRecord> = self
            .entries
            .iter()
            .map(|(k, v)| {
                (
                    k.as_str(),
                    TensorRecord {
                        shape: v.shape().to_vec(),
                        values: v.values().to_vec(),
                    },
                )
            })
            .collect();
        Ok(serde_json::to_string_pretty(&map)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let map: IndexMap<String, TensorRecord> = serde_json::from_str(text)?;
        let mut out = ParameterSet::new();
        for (name, rec) in map {
            out.insert(name, Tensor::new(rec.shape, rec.values)?)?;
        }
        Ok(out)
    }
}
