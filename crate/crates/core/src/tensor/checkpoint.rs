//! Flat binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "DESTACKP"
//! version    u32      1
//! n_meta     u32
//!   key_len u32, key utf-8, val_len u32, val utf-8      (sorted by key)
//! n_entries  u32
//!   name_len u32, name utf-8, frozen u8, rank u32, dims u64 × rank   (sorted by name)
//! payloads   f64 × numel per entry, same order as the manifest
//! ```
//!
//! Entries and metadata are written in sorted order so that saving the same
//! contents twice produces identical bytes.

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

use super::{ParamStore, Parameter, Tensor};

const MAGIC: &[u8; 8] = b"DESTACKP";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("checkpoint entry `{name}` has shape {found:?}, model expects {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint entry `{0}` has no matching model parameter")]
    UnknownEntry(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointEntry {
    pub tensor: Tensor,
    pub frozen: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: BTreeMap<String, CheckpointEntry>,
    pub meta: BTreeMap<String, String>,
}

impl Checkpoint {
    /// Snapshot of every parameter accepted by `filter`.
    pub fn from_store(store: &ParamStore, mut filter: impl FnMut(&Parameter) -> bool) -> Self {
        let entries = store
            .iter_sorted()
            .filter(|(_, p)| filter(p))
            .map(|(_, p)| {
                (
                    p.name.clone(),
                    CheckpointEntry {
                        tensor: p.tensor.clone(),
                        frozen: p.frozen,
                    },
                )
            })
            .collect();
        Self {
            entries,
            meta: BTreeMap::new(),
        }
    }

    /// Copies every entry into the matching parameter. Frozen flags in the
    /// store are left untouched.
    pub fn apply_to(&self, store: &mut ParamStore) -> Result<usize, CheckpointError> {
        for (name, entry) in &self.entries {
            let id = store
                .id(name)
                .map_err(|_| CheckpointError::UnknownEntry(name.clone()))?;
            let p = store.get_mut(id);
            if p.tensor.shape() != entry.tensor.shape() {
                return Err(CheckpointError::ShapeMismatch {
                    name: name.clone(),
                    expected: p.tensor.shape().to_vec(),
                    found: entry.tensor.shape().to_vec(),
                });
            }
            p.tensor = entry.tensor.clone();
        }
        Ok(self.entries.len())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for (k, v) in &self.meta {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, e) in &self.entries {
            put_str(&mut out, name);
            out.push(u8::from(e.frozen));
            out.extend_from_slice(&(e.tensor.rank() as u32).to_le_bytes());
            for d in e.tensor.shape() {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
        }
        for e in self.entries.values() {
            out.extend_from_slice(&e.tensor.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(CheckpointError::Format("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Format(format!(
                "unsupported version {version}"
            )));
        }
        let mut meta = BTreeMap::new();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            let v = r.string()?;
            meta.insert(k, v);
        }
        let n = r.u32()? as usize;
        let mut manifest = Vec::with_capacity(n);
        for _ in 0..n {
            let name = r.string()?;
            let frozen = match r.take(1)?[0] {
                0 => false,
                1 => true,
                b => return Err(CheckpointError::Format(format!("bad frozen flag {b}"))),
            };
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()?;
            manifest.push((name, frozen, shape));
        }
        let mut entries = BTreeMap::new();
        for (name, frozen, shape) in manifest {
            let numel: usize = shape.iter().product();
            let raw = r.take(numel * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let tensor =
                Tensor::new(&shape, data).map_err(|e| CheckpointError::Format(e.to_string()))?;
            entries.insert(name, CheckpointEntry { tensor, frozen });
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Format(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Self { entries, meta })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| CheckpointError::Format("unexpected end of data".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String, CheckpointError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| CheckpointError::Format("invalid utf-8 in name".into()))
    }
}
