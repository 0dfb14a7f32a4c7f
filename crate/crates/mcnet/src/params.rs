//! Named parameter storage with per-entry gradient buffers and a binary
//! checkpoint format.
//!
//! Entries keep their insertion order; everything that iterates the store
//! (updates, checkpointing, finite-difference sweeps) walks that order, which
//! is what makes training trajectories bit-reproducible.
//!
//! # Checkpoint layout
//!
//! All integers little-endian:
//!
//! ```text
//! magic    8 bytes   b"MCNETCK1"
//! meta_len u32       length of the UTF-8 JSON metadata blob
//! meta     meta_len  arbitrary JSON (model config, seed, normalization stats)
//! count    u32       number of entries, in store order
//! entry:
//!   name_len u16     UTF-8 name length
//!   name     bytes
//!   rows     u32
//!   cols     u32
//!   data     rows*cols f64 little-endian, row-major
//! ```

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"MCNETCK1";

/// Index of a parameter entry; stable for the lifetime of the store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }

    #[cfg(test)]
    pub fn test_only(i: usize) -> Self {
        ParamId(i)
    }
}

struct Entry {
    name: String,
    value: Tensor,
    grad: Tensor,
}

#[derive(Default)]
pub struct ParameterStore {
    entries: Vec<Entry>,
    index: HashMap<String, usize>,
}

impl ParameterStore {
    pub fn new() -> Self {
        ParameterStore::default()
    }

    /// Registers a new entry. Names are unique; re-registering is an error,
    /// never a silent overwrite.
    pub fn add(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::Contract(format!("duplicate parameter name '{name}'")));
        }
        let grad = Tensor::zeros(value.rows(), value.cols());
        let id = self.entries.len();
        self.index.insert(name.to_string(), id);
        self.entries.push(Entry { name: name.to_string(), value, grad });
        Ok(ParamId(id))
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| Error::Lookup(format!("unknown parameter '{name}'")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].grad
    }

    pub fn set_value(&mut self, id: ParamId, t: Tensor) -> Result<()> {
        if t.shape() != self.entries[id.0].value.shape() {
            return Err(Error::Contract(format!(
                "shape mismatch setting '{}': {:?} vs {:?}",
                self.entries[id.0].name,
                t.shape(),
                self.entries[id.0].value.shape()
            )));
        }
        self.entries[id.0].value = t;
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.fill(0.0);
        }
    }

    pub fn accumulate_grad(&mut self, id: ParamId, g: &Tensor) {
        debug_assert_eq!(self.entries[id.0].grad.shape(), g.shape());
        self.entries[id.0].grad.add_assign(g);
    }

    /// Entry ids in insertion order.
    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    /// Ids whose names start with any of the given prefixes, in store order.
    pub fn ids_with_prefixes(&self, prefixes: &[&str]) -> Vec<ParamId> {
        self.ids()
            .filter(|id| prefixes.iter().any(|p| self.name(*id).starts_with(p)))
            .collect()
    }

    /// Total number of scalar coordinates across all entries.
    pub fn total_len(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Deep copy of all values (used for freeze-contract checks and model
    /// selection snapshots).
    pub fn snapshot_values(&self) -> Vec<Tensor> {
        self.entries.iter().map(|e| e.value.clone()).collect()
    }

    pub fn restore_values(&mut self, snapshot: &[Tensor]) {
        assert_eq!(snapshot.len(), self.entries.len());
        for (e, s) in self.entries.iter_mut().zip(snapshot) {
            debug_assert_eq!(e.value.shape(), s.shape());
            e.value = s.clone();
        }
    }

    pub fn values_bit_eq(&self, snapshot: &[Tensor], ids: &[ParamId]) -> bool {
        ids.iter().all(|id| self.entries[id.0].value.bit_eq(&snapshot[id.0]))
    }

    pub fn save(&self, path: &Path, meta_json: &str) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MAGIC);
        let meta = meta_json.as_bytes();
        buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        buf.extend_from_slice(meta);
        buf.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            let name = e.name.as_bytes();
            buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
            buf.extend_from_slice(name);
            buf.extend_from_slice(&(e.value.rows() as u32).to_le_bytes());
            buf.extend_from_slice(&(e.value.cols() as u32).to_le_bytes());
            for v in e.value.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    /// Loads a checkpoint; returns the store and its metadata JSON.
    pub fn load(path: &Path) -> Result<(Self, String)> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > bytes.len() {
                return Err(Error::Checkpoint("truncated checkpoint file".into()));
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        if take(&mut pos, 8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
        }
        let meta_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let meta = String::from_utf8(take(&mut pos, meta_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("metadata is not UTF-8".into()))?;
        let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let mut store = ParameterStore::new();
        for _ in 0..count {
            let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
                .map_err(|_| Error::Checkpoint("entry name is not UTF-8".into()))?;
            let rows = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let cols = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let n = rows
                .checked_mul(cols)
                .ok_or_else(|| Error::Checkpoint("entry shape overflow".into()))?;
            let raw = take(&mut pos, n * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::from_vec(rows, cols, data)
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
            store.add(&name, t).map_err(|e| Error::Checkpoint(e.to_string()))?;
        }
        if pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after last entry".into()));
        }
        Ok((store, meta))
    }
}

/// Xavier-uniform limit for a (fan_out x fan_in) weight matrix.
pub fn xavier_limit(fan_out: usize, fan_in: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}
