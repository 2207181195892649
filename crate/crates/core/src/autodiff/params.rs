use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::ops::Index;
use std::path::Path;

use super::{DiffTensor, Graph};
use crate::error::{ensure, Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CKPT";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Ordered, named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, usize>,
}

/// Graph handles for every entry of a [`ParamStore`], in store order.
#[derive(Clone, Debug)]
pub struct Bound(Vec<DiffTensor>);

impl Index<ParamId> for Bound {
    type Output = DiffTensor;

    fn index(&self, id: ParamId) -> &DiffTensor {
        &self.0[id.0]
    }
}

impl Bound {
    pub fn tensors(&self) -> &[DiffTensor] {
        &self.0
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, shape: &[usize], values: Vec<f64>) -> Result<ParamId> {
        ensure!(
            !self.by_name.contains_key(name),
            InvalidArgument,
            "duplicate parameter {}",
            name
        );
        ensure!(
            shape.iter().product::<usize>() == values.len(),
            DimensionMismatch,
            "parameter {}: {} values for shape {:?}",
            name,
            values.len(),
            shape
        );
        self.by_name.insert(name.to_string(), self.entries.len());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
            values,
        });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.values.len()).sum()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn values_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.entries[id.0].values
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Inserts every entry as a leaf; `trainable` decides whether gradients flow into them.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        Bound(
            self.entries
                .iter()
                .map(|e| {
                    g.leaf(&e.shape, e.values.clone(), trainable)
                        .expect("store entries are shape-consistent")
                })
                .collect(),
        )
    }

    /// Gradients of the bound leaves after `g.backward`, zeros where none flowed.
    pub fn gradients(&self, g: &Graph, bound: &Bound) -> Vec<Vec<f64>> {
        bound.0.iter().map(|&t| g.grad_or_zeros(t)).collect()
    }

    /// Replaces all values from another store with identical names and shapes.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        ensure!(
            self.entries.len() == other.entries.len(),
            DimensionMismatch,
            "checkpoint holds {} tensors, model expects {}",
            other.entries.len(),
            self.entries.len()
        );
        for (mine, theirs) in self.entries.iter_mut().zip(&other.entries) {
            ensure!(
                mine.name == theirs.name && mine.shape == theirs.shape,
                DimensionMismatch,
                "checkpoint tensor {} {:?} does not match model tensor {} {:?}",
                theirs.name,
                theirs.shape,
                mine.name,
                mine.shape
            );
            mine.values.clone_from(&theirs.values);
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(12 + 8 * self.num_scalars());
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            buf.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            buf.extend_from_slice(e.name.as_bytes());
            buf.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
            for &d in &e.shape {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in &e.values {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut pos = 0usize;
        let mut take = |n: usize| -> std::result::Result<&[u8], String> {
            let s = bytes.get(pos..pos + n).ok_or_else(|| format!("truncated at byte {}", pos))?;
            pos += n;
            Ok(s)
        };
        if take(4)? != CHECKPOINT_MAGIC {
            return Err("missing CKPT magic".into());
        }
        let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(format!("unsupported checkpoint version {}", version));
        }
        let count = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let name_len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(name_len)?.to_vec()).map_err(|e| e.to_string())?;
            let ndim = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize);
            }
            let n: usize = shape.iter().product();
            let raw = take(8 * n)?;
            let values = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            store.add(&name, &shape, values).map_err(|e| e.to_string())?;
        }
        if pos != bytes.len() {
            return Err(format!("{} trailing bytes", bytes.len() - pos));
        }
        Ok(store)
    }
}

/// Writes `CKPT, u32 version, u32 count, then per tensor: u32 name_len, name,
/// u32 ndim, u64 dims[ndim], f64 values` (little-endian).
pub fn write_checkpoint(path: &Path, store: &ParamStore) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&store.to_bytes()).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<ParamStore> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    ParamStore::from_bytes(&bytes).map_err(|reason| Error::format(path, reason))
}
