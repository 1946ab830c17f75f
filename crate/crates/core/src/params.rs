//! Named parameter storage shared by every model block.

use crate::error::{Error, Result};
use crate::graph::{Graph, VarId};
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
    pub frozen: bool,
}

/// Ordered collection of named parameter tensors. Order is insertion order
/// and is part of the checkpoint contract.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        if self.by_name.contains_key(name) {
            return Err(Error::invalid(format!("duplicate parameter '{name}'")));
        }
        self.by_name.insert(name.to_string(), self.entries.len());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            tensor,
            frozen: false,
        });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&ParamEntry> {
        self.by_name
            .get(name)
            .map(|&i| &self.entries[i])
            .ok_or_else(|| Error::invalid(format!("unknown parameter '{name}'")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut ParamEntry> {
        match self.by_name.get(name) {
            Some(&i) => Ok(&mut self.entries[i]),
            None => Err(Error::invalid(format!("unknown parameter '{name}'"))),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.by_name.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamEntry> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamEntry> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn freeze_all(&mut self) {
        for e in self.entries.iter_mut() {
            e.frozen = true;
        }
    }

    pub fn all_frozen(&self) -> bool {
        self.entries.iter().all(|e| e.frozen)
    }

    /// Freeze every parameter whose name starts with `prefix`.
    pub fn freeze_prefix(&mut self, prefix: &str) {
        for e in self.entries.iter_mut() {
            if e.name.starts_with(prefix) {
                e.frozen = true;
            }
        }
    }

    /// Insert every parameter into a graph as a leaf. Frozen entries become
    /// constants so backward skips them entirely.
    pub fn bind(&self, graph: &mut Graph) -> BoundParams {
        let mut vars = HashMap::with_capacity(self.entries.len());
        for e in &self.entries {
            let id = graph.leaf(e.tensor.clone(), !e.frozen);
            vars.insert(e.name.clone(), id);
        }
        BoundParams { vars }
    }

    /// As `bind`, but every leaf is a constant regardless of the frozen flag
    /// (teacher-side forward passes).
    pub fn bind_frozen(&self, graph: &mut Graph) -> BoundParams {
        let mut vars = HashMap::with_capacity(self.entries.len());
        for e in &self.entries {
            let id = graph.constant(e.tensor.clone());
            vars.insert(e.name.clone(), id);
        }
        BoundParams { vars }
    }

    /// Bitwise fingerprint over names, shapes, frozen flags and payloads.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut mix = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        for e in &self.entries {
            mix(e.name.as_bytes());
            mix(&[e.frozen as u8]);
            for &d in e.tensor.shape() {
                mix(&(d as u64).to_le_bytes());
            }
            for &v in e.tensor.data() {
                mix(&v.to_le_bytes());
            }
        }
        h
    }
}

/// Graph leaf ids for one `ParamStore::bind` call.
pub struct BoundParams {
    vars: HashMap<String, VarId>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Result<VarId> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("parameter '{name}' not bound")))
    }
}

/// Uniform init in [-1/sqrt(fan_in), +1/sqrt(fan_in)].
pub fn init_matrix(rng: &mut ChaCha8Rng, fan_in: usize, rows: usize, cols: usize) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.gen_range(-bound..bound))
        .collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

pub fn init_vector(rng: &mut ChaCha8Rng, fan_in: usize, len: usize) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let data = (0..len).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::vector(data)
}
