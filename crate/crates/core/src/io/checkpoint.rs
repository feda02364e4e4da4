//! Binary checkpoint format, version 1. All integers little-endian.
//!
//! ```text
//! magic        4 bytes  "OVLM"
//! version      u32      1
//! config_len   u32
//! config       config_len bytes of UTF-8 JSON (ModelConfig)
//! count        u32
//! count × {
//!     name_len u16, name (UTF-8),
//!     ndim u8, dims u32 × ndim,
//!     dtype u8 (0 = f32),
//!     payload 4 · product(dims) bytes, f32 LE
//! }
//! ```
//!
//! Tensors are written in name order, so identical weights always produce
//! identical bytes. Every length is checked against the bytes that remain
//! before anything is allocated.

use std::path::Path;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::weights::Weights;

pub const MAGIC: [u8; 4] = *b"OVLM";
pub const FORMAT_VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum CheckpointError {
    #[error("bad magic {0:?} (expected \"OVLM\")")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated checkpoint while reading {context}: need {needed} bytes, {available} left")]
    Truncated {
        context: String,
        needed: usize,
        available: usize,
    },
    #[error("invalid config block: {0}")]
    InvalidConfig(String),
    #[error("tensor name is not valid UTF-8")]
    InvalidName,
    #[error("duplicate tensor {0}")]
    DuplicateTensor(String),
    #[error("tensor {name}: unknown dtype {dtype}")]
    UnknownDtype { name: String, dtype: u8 },
    #[error("tensor {name}: shape {found:?} does not match expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("tensor set does not match config: missing {missing:?}, unexpected {unexpected:?}")]
    TensorSet {
        missing: Vec<String>,
        unexpected: Vec<String>,
    },
    #[error("missing tensor {0}")]
    MissingTensor(String),
    #[error("{0} trailing bytes after tensor table")]
    TrailingBytes(usize),
}

/// Serializes a validated weight set and its config.
pub fn to_bytes(weights: &Weights<f32>, config: &ModelConfig) -> Result<Vec<u8>> {
    config.validate()?;
    weights.validate(config)?;
    let cfg_json = config.to_json();
    let mut out = Vec::with_capacity(16 + cfg_json.len() + 4 * weights.param_count() + 64 * weights.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(cfg_json.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg_json.as_bytes());
    out.extend_from_slice(&(weights.len() as u32).to_le_bytes());
    for (name, t) in weights.iter() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.ndim() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.push(DTYPE_F32);
        for &x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, context: &str) -> Result<&'a [u8], CheckpointError> {
        let available = self.buf.len() - self.pos;
        if n > available {
            return Err(CheckpointError::Truncated {
                context: context.to_string(),
                needed: n,
                available,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, context: &str) -> Result<u8, CheckpointError> {
        Ok(self.take(1, context)?[0])
    }

    fn u16(&mut self, context: &str) -> Result<u16, CheckpointError> {
        let b = self.take(2, context)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, context: &str) -> Result<u32, CheckpointError> {
        let b = self.take(4, context)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Parses and validates a checkpoint.
pub fn from_bytes(bytes: &[u8]) -> Result<(Weights<f32>, ModelConfig)> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    let magic = c.take(4, "magic")?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic([magic[0], magic[1], magic[2], magic[3]]).into());
    }
    let version = c.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version).into());
    }
    let cfg_len = c.u32("config length")? as usize;
    let cfg_bytes = c.take(cfg_len, "config")?;
    let cfg_text =
        std::str::from_utf8(cfg_bytes).map_err(|e| CheckpointError::InvalidConfig(e.to_string()))?;
    let config: ModelConfig =
        serde_json::from_str(cfg_text).map_err(|e| CheckpointError::InvalidConfig(e.to_string()))?;
    config
        .validate()
        .map_err(|e| CheckpointError::InvalidConfig(e.to_string()))?;

    let count = c.u32("tensor count")?;
    let mut weights = Weights::new();
    for i in 0..count {
        let name_len = c.u16(&format!("tensor {i} name length"))? as usize;
        let name = std::str::from_utf8(c.take(name_len, &format!("tensor {i} name"))?)
            .map_err(|_| CheckpointError::InvalidName)?
            .to_string();
        let ndim = c.u8(&format!("{name} ndim"))? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(c.u32(&format!("{name} dims"))? as usize);
        }
        let dtype = c.u8(&format!("{name} dtype"))?;
        if dtype != DTYPE_F32 {
            return Err(CheckpointError::UnknownDtype { name, dtype }.into());
        }
        let numel = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n > 0 && ndim > 0)
            .ok_or_else(|| CheckpointError::ShapeMismatch {
                name: name.clone(),
                expected: Vec::new(),
                found: dims.clone(),
            })?;
        let payload_len = numel.checked_mul(4).ok_or_else(|| CheckpointError::Truncated {
            context: format!("{name} payload"),
            needed: usize::MAX,
            available: bytes.len() - c.pos,
        })?;
        let payload = c.take(payload_len, &format!("{name} payload"))?;
        let data = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let t = Tensor::new(dims, data)?;
        if weights.insert(name.clone(), t).is_some() {
            return Err(CheckpointError::DuplicateTensor(name).into());
        }
    }
    let rest = bytes.len() - c.pos;
    if rest != 0 {
        return Err(CheckpointError::TrailingBytes(rest).into());
    }
    weights.validate(&config)?;
    Ok((weights, config))
}

pub fn save(weights: &Weights<f32>, config: &ModelConfig, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = to_bytes(weights, config)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<(Weights<f32>, ModelConfig)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
