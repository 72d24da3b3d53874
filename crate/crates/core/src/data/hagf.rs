//! HAGF feature files.
//!
//! Layout (little-endian): magic `HAGF`, `u32` version = 1, `u32` level,
//! `u64` rows `n`, `u64` columns `d`, then `n·d` 32-bit floats row-major.
//! Values are promoted to `f64` on load.

use std::fs;
use std::path::Path;

use crate::binio::{usize_from, Reader};
use crate::error::{HagError, Result};
use crate::tensor::Tensor;

pub const HAGF_MAGIC: [u8; 4] = *b"HAGF";
pub const HAGF_VERSION: u32 = 1;
pub const HAGF_HEADER_LEN: usize = 28;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HagfHeader {
    pub version: u32,
    pub level: u32,
    pub n: u64,
    pub d: u64,
}

/// Rounds a value to the nearest representable 32-bit float.
pub fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

pub fn encode_features(level: u32, features: &Tensor) -> Result<Vec<u8>> {
    if features.shape().len() != 2 {
        return Err(HagError::InvalidArgument(format!(
            "features must be a matrix, got shape {:?}",
            features.shape()
        )));
    }
    let mut out = Vec::with_capacity(HAGF_HEADER_LEN + 4 * features.len());
    out.extend_from_slice(&HAGF_MAGIC);
    out.extend_from_slice(&HAGF_VERSION.to_le_bytes());
    out.extend_from_slice(&level.to_le_bytes());
    out.extend_from_slice(&(features.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(features.cols() as u64).to_le_bytes());
    for &v in features.data() {
        let x = v as f32;
        if !x.is_finite() {
            return Err(HagError::NonFinite { op: "write_features" });
        }
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(out)
}

fn header(r: &mut Reader<'_>) -> Result<HagfHeader> {
    r.magic(HAGF_MAGIC)?;
    let version = r.version(HAGF_VERSION)?;
    Ok(HagfHeader {
        version,
        level: r.u32()?,
        n: r.u64()?,
        d: r.u64()?,
    })
}

pub fn decode_header(bytes: &[u8]) -> Result<HagfHeader> {
    header(&mut Reader::new(bytes))
}

pub fn decode_features(bytes: &[u8]) -> Result<(HagfHeader, Tensor)> {
    let mut r = Reader::new(bytes);
    let h = header(&mut r)?;
    let raw = r.array(h.n.saturating_mul(h.d), 4)?;
    let data = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    let t = Tensor::matrix(usize_from(h.n)?, usize_from(h.d)?, data)?;
    Ok((h, t))
}

pub fn write_features(path: &Path, level: u32, features: &Tensor) -> Result<()> {
    fs::write(path, encode_features(level, features)?).map_err(|e| HagError::io(path, e))
}

pub fn read_features(path: &Path) -> Result<(HagfHeader, Tensor)> {
    decode_features(&fs::read(path).map_err(|e| HagError::io(path, e))?)
}

/// Reads only the 28-byte header.
pub fn read_header(path: &Path) -> Result<HagfHeader> {
    use std::io::Read;
    let mut buf = Vec::with_capacity(HAGF_HEADER_LEN);
    fs::File::open(path)
        .and_then(|f| f.take(HAGF_HEADER_LEN as u64).read_to_end(&mut buf))
        .map_err(|e| HagError::io(path, e))?;
    decode_header(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_at_f32_precision() {
        let t = Tensor::matrix(2, 3, vec![0.1, -2.0, 3.5, 1e-3, 7.25, -0.3]).unwrap();
        let (h, back) = decode_features(&encode_features(2, &t).unwrap()).unwrap();
        assert_eq!(
            h,
            HagfHeader {
                version: 1,
                level: 2,
                n: 2,
                d: 3
            }
        );
        for (a, b) in back.data().iter().zip(t.data()) {
            assert_eq!(*a, round_f32(*b));
        }
    }

    #[test]
    fn distinct_header_errors() {
        let bytes = encode_features(0, &Tensor::zeros(2, 2)).unwrap();
        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"XXXX");
        assert_eq!(decode_features(&bad).unwrap_err().kind(), "bad_magic");
        let mut bad = bytes.clone();
        bad[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert_eq!(decode_features(&bad).unwrap_err().kind(), "version_mismatch");
        let mut bad = bytes.clone();
        bad[12..20].copy_from_slice(&3u64.to_le_bytes());
        assert_eq!(decode_features(&bad).unwrap_err().kind(), "truncated");
    }

    #[test]
    fn rejects_overflowing_float() {
        let t = Tensor::matrix(1, 1, vec![1e300]).unwrap();
        assert!(encode_features(0, &t).is_err());
    }
}
