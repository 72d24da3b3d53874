//! Binary checkpoints of named parameter tensors.
//!
//! Layout (little-endian): magic `HAGC`, `u32` version, `u32` tensor count,
//! then per tensor: `u32` name length, UTF-8 name, `u32` rank, `u64` dims,
//! and the values as 64-bit floats row-major. Values round-trip bit-exactly.

use std::fs;
use std::path::Path;

use crate::binio::{usize_from, Reader};
use crate::error::{HagError, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"HAGC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Name and shape of one stored tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

pub fn encode(params: &ParamSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + params.scalar_count() * 8);
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader::new(bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    r.version(CHECKPOINT_VERSION)?;
    let count = r.u32()?;
    let mut out = Vec::with_capacity(count.min(1 << 16) as usize);
    for _ in 0..count {
        let name_len = r.u32()?;
        let name = std::str::from_utf8(r.take(name_len as u64)?)
            .map_err(|e| HagError::Checkpoint(format!("tensor name is not UTF-8: {e}")))?
            .to_string();
        let rank = r.u32()?;
        let mut shape = Vec::with_capacity(rank.min(8) as usize);
        let mut numel: u64 = 1;
        for _ in 0..rank {
            let d = r.u64()?;
            numel = numel.saturating_mul(d);
            shape.push(usize_from(d)?);
        }
        let raw = r.array(numel, 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| HagError::Checkpoint(format!("tensor {name}: {e}")))?;
        out.push((name, t));
    }
    if r.remaining() != 0 {
        return Err(HagError::Checkpoint(format!("{} trailing bytes", r.remaining())));
    }
    Ok(out)
}

/// Tensor names and shapes without materializing values.
pub fn describe(bytes: &[u8]) -> Result<Vec<TensorInfo>> {
    Ok(decode(bytes)?
        .into_iter()
        .map(|(name, t)| TensorInfo {
            name,
            shape: t.shape().to_vec(),
        })
        .collect())
}

pub fn save(path: &Path, params: &ParamSet) -> Result<()> {
    fs::write(path, encode(params)).map_err(|e| HagError::io(path, e))
}

pub fn read(path: &Path) -> Result<Vec<(String, Tensor)>> {
    decode(&fs::read(path).map_err(|e| HagError::io(path, e))?)
}

/// Loads a checkpoint into `params`, which must have the same layout.
pub fn load_into(path: &Path, params: &mut ParamSet) -> Result<()> {
    params.load(read(path)?)
}
