// SPDX-License-Identifier: Apache-2.0

//! Binary model checkpoints.
//!
//! All integers little-endian:
//!
//! ```text
//! magic      8 bytes  "FGNNCKPT"
//! version    u32      1
//! meta_len   u32      byte length of the JSON header
//! meta       JSON     {"model": ModelConfig, "ratio": {"mean", "std"}}
//! count      u32      number of tensors
//! per tensor:
//!   name_len u32, name (UTF-8)
//!   ndim     u32, dims (u64 each)
//!   values   f64 x product(dims), row-major
//! ```

use std::io::{self, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::batch::RatioScaler;
use crate::model::{FuncGnn, ModelConfig, ModelError};

pub const MAGIC: &[u8; 8] = b"FGNNCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Serialize, Deserialize)]
struct Meta {
    model: ModelConfig,
    ratio: RatioScaler,
}

fn put_u32(w: &mut impl Write, v: usize) -> Result<(), CheckpointError> {
    let v = u32::try_from(v).map_err(|_| CheckpointError::Malformed(format!("{v} exceeds u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn write_model(model: &FuncGnn, w: &mut impl Write) -> Result<(), CheckpointError> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let meta = serde_json::to_vec(&Meta {
        model: model.config().clone(),
        ratio: *model.scaler(),
    })
    .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    put_u32(w, meta.len())?;
    w.write_all(&meta)?;
    put_u32(w, model.params().len())?;
    for p in model.params().iter() {
        put_u32(w, p.name.len())?;
        w.write_all(p.name.as_bytes())?;
        put_u32(w, p.value.shape().len())?;
        for &d in p.value.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &x in p.value.data() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

fn get_u32(r: &mut impl Read) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_bytes(r: &mut impl Read, n: usize) -> Result<Vec<u8>, CheckpointError> {
    let mut buf = Vec::new();
    r.take(n as u64).read_to_end(&mut buf)?;
    if buf.len() != n {
        return Err(CheckpointError::Malformed("truncated".into()));
    }
    Ok(buf)
}

pub fn read_model(r: &mut impl Read) -> Result<FuncGnn, CheckpointError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = get_u32(r)?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let meta_len = get_u32(r)? as usize;
    let meta: Meta = serde_json::from_slice(&get_bytes(r, meta_len)?)
        .map_err(|e| CheckpointError::Malformed(format!("header: {e}")))?;
    let count = get_u32(r)? as usize;
    let mut tensors = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let name_len = get_u32(r)? as usize;
        let name = String::from_utf8(get_bytes(r, name_len)?)
            .map_err(|_| CheckpointError::Malformed("tensor name is not UTF-8".into()))?;
        let ndim = get_u32(r)? as usize;
        let mut shape = Vec::with_capacity(ndim.min(8));
        for _ in 0..ndim {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            shape.push(usize::try_from(u64::from_le_bytes(b)).map_err(|_| {
                CheckpointError::Malformed(format!("dimension of {name} too large"))
            })?);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| CheckpointError::Malformed(format!("{name} is too large")))?;
        let raw = get_bytes(r, n.saturating_mul(8))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let value = Tensor::new(shape, data)
            .map_err(|e| CheckpointError::Malformed(format!("{name}: {e}")))?;
        tensors.push((name, value));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(CheckpointError::Malformed("trailing bytes".into()));
    }
    Ok(FuncGnn::from_parts(meta.model, meta.ratio, tensors)?)
}

pub fn to_bytes(model: &FuncGnn) -> Vec<u8> {
    let mut buf = Vec::new();
    write_model(model, &mut buf).expect("writing to memory cannot fail");
    buf
}

pub fn save(model: &FuncGnn, path: &Path) -> Result<(), CheckpointError> {
    std::fs::write(path, to_bytes(model))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<FuncGnn, CheckpointError> {
    let bytes = std::fs::read(path)?;
    read_model(&mut bytes.as_slice())
}
