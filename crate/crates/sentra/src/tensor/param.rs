//! Named parameter storage shared by all trainable models.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::{numel, sc, Scalar};
use crate::error::{Result, SentraError};

pub type ParamId = usize;

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<T>,
}

/// Ordered collection of named parameters. Insertion order is part of the
/// contract: checkpoints, optimizer state and gradient vectors all align to
/// it.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    index: BTreeMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, name: &str, shape: &[usize], values: Vec<T>) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(SentraError::contract(format!("duplicate parameter {name}")));
        }
        if numel(shape) != values.len() {
            return Err(SentraError::shape(format!(
                "parameter {name}: shape {shape:?} implies {} values, got {}",
                numel(shape),
                values.len()
            )));
        }
        let id = self.entries.len();
        self.entries.push(ParamEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
            values,
        });
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn add_zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.add(name, shape, vec![T::zero(); numel(shape)])
    }

    /// Gaussian init with the given standard deviation.
    pub fn add_normal(
        &mut self,
        name: &str,
        shape: &[usize],
        std: f64,
        rng: &mut impl Rng,
    ) -> Result<ParamId> {
        let dist = Normal::new(0.0, std)
            .map_err(|e| SentraError::contract(format!("bad init std {std}: {e}")))?;
        let values: Vec<T> = (0..numel(shape)).map(|_| sc(dist.sample(rng))).collect();
        self.add(name, shape, values)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id]
    }

    pub fn entry_mut(&mut self, id: ParamId) -> &mut ParamEntry<T> {
        &mut self.entries[id]
    }

    pub fn by_name(&self, name: &str) -> Result<&ParamEntry<T>> {
        let id = self
            .id(name)
            .ok_or_else(|| SentraError::contract(format!("unknown parameter {name}")))?;
        Ok(self.entry(id))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamEntry<T>> {
        self.entries.iter()
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.entries.iter().map(|e| e.values.len()).sum()
    }

    /// Content hash over names, shapes and exact value bits. Used to verify
    /// frozen models stay frozen.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for e in &self.entries {
            hasher.update(e.name.as_bytes());
            hasher.update([0u8]);
            for &d in &e.shape {
                hasher.update((d as u64).to_le_bytes());
            }
            for &v in &e.values {
                hasher.update(v.to_f64().unwrap_or(f64::NAN).to_bits().to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }

    /// Convert element type, e.g. to run a trained `f32` model through the
    /// `f64` checking path.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for e in &self.entries {
            let values: Vec<U> = e
                .values
                .iter()
                .map(|&v| U::from_f64(v.to_f64().unwrap()).unwrap())
                .collect();
            out.add(&e.name, &e.shape, values).expect("cast add");
        }
        out
    }
}
