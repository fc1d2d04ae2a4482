//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      4 bytes  "SPDN"
//! version    1 byte   (currently 1)
//! meta_len   u32      length of the UTF-8 metadata block
//! meta       bytes    free-form text (the config snapshot)
//! count      u32      number of tensors
//! per tensor:
//!   name_len u32, name bytes (UTF-8)
//!   rank     u32, extents as u64 each
//!   data     product(extents) x f64 (IEEE-754 LE)
//! ```

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::autodiff::Parameter;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SPDN";
pub const VERSION: u8 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u8),
    #[error("checkpoint truncated at byte {0}")]
    Truncated(usize),
    #[error("checkpoint: {0}")]
    Format(String),
    #[error("checkpoint is missing parameter `{0}`")]
    Missing(String),
    #[error("parameter `{name}` has shape {expected:?}, checkpoint has {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub metadata: String,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_parameters(metadata: impl Into<String>, params: &[Parameter]) -> Self {
        Self {
            metadata: metadata.into(),
            tensors: params
                .iter()
                .map(|p| (p.name().to_string(), p.value().clone()))
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, CheckpointError> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        put_len(&mut out, self.metadata.len())?;
        out.extend_from_slice(self.metadata.as_bytes());
        put_len(&mut out, self.tensors.len())?;
        for (name, t) in &self.tensors {
            put_len(&mut out, name.len())?;
            out.extend_from_slice(name.as_bytes());
            put_len(&mut out, t.ndim())?;
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.take(1)?[0];
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let meta_len = r.u32()? as usize;
        let metadata = String::from_utf8(r.take(meta_len)?.to_vec())
            .map_err(|e| CheckpointError::Format(format!("metadata: {e}")))?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        let mut names = HashSet::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|e| CheckpointError::Format(format!("name: {e}")))?;
            if !names.insert(name.clone()) {
                return Err(CheckpointError::Format(format!(
                    "duplicate tensor `{name}`"
                )));
            }
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let d = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
                shape.push(
                    usize::try_from(d)
                        .map_err(|_| CheckpointError::Format("extent overflow".into()))?,
                );
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| CheckpointError::Format("extent overflow".into()))?;
            let raw = r.take(
                n.checked_mul(8)
                    .ok_or_else(|| CheckpointError::Format("size overflow".into()))?,
            )?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t =
                Tensor::new(&shape, data).map_err(|e| CheckpointError::Format(e.to_string()))?;
            tensors.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Format(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Self { metadata, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Copies stored values into `params`, matched by name.
    pub fn restore(&self, params: &[Parameter]) -> Result<(), CheckpointError> {
        for p in params {
            let (_, t) = self
                .tensors
                .iter()
                .find(|(n, _)| n == p.name())
                .ok_or_else(|| CheckpointError::Missing(p.name().to_string()))?;
            if t.shape() != p.shape() {
                return Err(CheckpointError::ShapeMismatch {
                    name: p.name().to_string(),
                    expected: p.shape(),
                    found: t.shape().to_vec(),
                });
            }
            p.set_value(t.clone())
                .map_err(|e| CheckpointError::Format(e.to_string()))?;
        }
        Ok(())
    }
}

fn put_len(out: &mut Vec<u8>, n: usize) -> Result<(), CheckpointError> {
    let n =
        u32::try_from(n).map_err(|_| CheckpointError::Format(format!("length {n} exceeds u32")))?;
    out.extend_from_slice(&n.to_le_bytes());
    Ok(())
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
            .ok_or(CheckpointError::Truncated(self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}
