//! Named trainable parameters and their `BFL1` binary file format.
//!
//! Layout (all integers little-endian `u32`):
//! `"BFL1"`, entry count, then per entry: name length, UTF-8 name, rank,
//! dims, raw little-endian `f32` payload. Entries are written in name order.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{write_atomic, ByteReader};

use super::{Tape, Tensor};

pub const PARAM_MAGIC: &[u8; 4] = b"BFL1";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Tensor<f32>>,
    pub step_count: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor<f32>) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name {name:?}")));
        }
        self.entries
            .insert(name.to_string(), tensor.with_requires_grad(true));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<f32>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name:?}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// Overwrites values in place; the shape cannot change.
    pub fn set_data(&mut self, name: &str, data: &[f32]) -> Result<()> {
        let t = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name:?}")))?;
        if t.numel() != data.len() {
            return Err(Error::Config(format!(
                "parameter {name:?} holds {} values, got {}",
                t.numel(),
                data.len()
            )));
        }
        t.data_mut().copy_from_slice(data);
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<f32>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    pub fn zero_grads(&mut self) {
        self.entries.values_mut().for_each(Tensor::zero_grad);
    }

    /// Adds `scale ·` each bound parameter's tape gradient into its buffer.
    pub fn accumulate_from(&mut self, tape: &Tape<f32>, scale: f32) -> Result<()> {
        for (name, grad) in tape.param_grads() {
            if let Some(g) = grad {
                let t = self.entries.get_mut(name).ok_or_else(|| {
                    Error::Config(format!("tape bound unknown parameter {name:?}"))
                })?;
                t.accumulate_grad(g, scale)?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + self.num_values() * 4);
        out.extend_from_slice(PARAM_MAGIC);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "parameter file");
        r.expect_magic(PARAM_MAGIC)?;
        let count = r.u32()?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = r.utf8(name_len)?;
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let data = r.f32_vec(numel)?;
            let at = r.offset();
            store
                .insert(&name, Tensor::new(shape, data)?)
                .map_err(|e| r.error_at(at, e.to_string()))?;
        }
        r.expect_end()?;
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, |f| f.write_all(&self.to_bytes()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
