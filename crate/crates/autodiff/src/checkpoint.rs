//! Named parameter storage and its on-disk form.
//!
//! File layout, all integers little-endian:
//!
//! ```text
//! magic   b"LPDW"
//! version u32 (= 1)
//! count   u32
//! count x {
//!     name_len u32, name (UTF-8)
//!     rank u32, rank x u64 extents
//!     numel x f32 values
//! }
//! ```
//!
//! Entries keep insertion order, which is also the order parameters are
//! bound to a tape.

use std::io::{self, Read, Write};

use thiserror::Error;

use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"LPDW";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("not a weight file (bad magic)")]
    BadMagic,
    #[error("unsupported weight file version {0}")]
    Version(u32),
    #[error("corrupt weight file: {0}")]
    Corrupt(String),
    #[error("parameter {0:?} defined twice")]
    Duplicate(String),
    #[error("parameter {name:?}: expected shape {expected:?}, file has {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("parameter {0:?} missing from weight file")]
    Missing(String),
    #[error("weight file has unexpected parameter {0:?}")]
    Unexpected(String),
}

/// Ordered mapping from parameter name to a 32-bit tensor.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Tensor<f32>)>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<f32>) -> Result<(), CheckpointError> {
        let name = name.into();
        if self.index_of(&name).is_some() {
            return Err(CheckpointError::Duplicate(name));
        }
        self.entries.push((name, value));
        Ok(())
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.index_of(name).map(|i| &self.entries[i].1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut Tensor<f32>> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<(), CheckpointError> {
        w.write_all(MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, t) in &self.entries {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &e in t.shape() {
                w.write_all(&(e as u64).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(t.numel() * 4);
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self, CheckpointError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version(version));
        }
        let count = read_u32(&mut r)?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let len = read_u32(&mut r)? as usize;
            if len > 4096 {
                return Err(CheckpointError::Corrupt(format!("name length {len}")));
            }
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| CheckpointError::Corrupt("name is not UTF-8".into()))?;
            let rank = read_u32(&mut r)? as usize;
            if rank > 8 {
                return Err(CheckpointError::Corrupt(format!("{name}: rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let n = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e));
            let n = n.filter(|&n| n <= 1 << 28).ok_or_else(|| CheckpointError::Corrupt(format!("{name}: shape {shape:?}")))?;
            let mut buf = vec![0u8; n * 4];
            r.read_exact(&mut buf)?;
            let data = buf.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Corrupt(format!("{name}: {e}")))?;
            store.insert(name, t)?;
        }
        Ok(store)
    }

    /// Replaces every value with the same-named entry of `other`, which must
    /// hold exactly the same names and shapes.
    pub fn load_matching(&mut self, other: ParamStore) -> Result<(), CheckpointError> {
        for (name, _) in other.iter() {
            if self.index_of(name).is_none() {
                return Err(CheckpointError::Unexpected(name.to_string()));
            }
        }
        let mut other = other;
        for (name, value) in &mut self.entries {
            let i = other.index_of(name).ok_or_else(|| CheckpointError::Missing(name.clone()))?;
            let found = &other.entries[i].1;
            if found.shape() != value.shape() {
                return Err(CheckpointError::ShapeMismatch {
                    name: name.clone(),
                    expected: value.shape().to_vec(),
                    found: found.shape().to_vec(),
                });
            }
            *value = std::mem::replace(&mut other.entries[i].1, Tensor::zeros(vec![0]));
        }
        Ok(())
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
