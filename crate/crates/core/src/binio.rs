//! Little-endian byte cursor shared by the on-disk formats.

use crate::error::{HagError, Result};

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: u64) -> Result<&'a [u8]> {
        let available = self.remaining() as u64;
        if n > available {
            return Err(HagError::Truncated { declared: n, available });
        }
        let start = self.pos;
        self.pos += n as usize;
        Ok(&self.buf[start..self.pos])
    }

    pub(crate) fn magic(&mut self, expected: [u8; 4]) -> Result<()> {
        let b = self.take(4)?;
        let found = [b[0], b[1], b[2], b[3]];
        if found != expected {
            return Err(HagError::BadMagic { found, expected });
        }
        Ok(())
    }

    pub(crate) fn version(&mut self, expected: u32) -> Result<u32> {
        let found = self.u32()?;
        if found != expected {
            return Err(HagError::VersionMismatch { found, expected });
        }
        Ok(found)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    /// `count` values of `width` bytes each, with overflow-safe size checks.
    pub(crate) fn array(&mut self, count: u64, width: u64) -> Result<&'a [u8]> {
        let bytes = count.checked_mul(width).ok_or(HagError::Truncated {
            declared: u64::MAX,
            available: self.remaining() as u64,
        })?;
        self.take(bytes)
    }
}

pub(crate) fn usize_from(v: u64) -> Result<usize> {
    usize::try_from(v).map_err(|_| HagError::InvalidArgument(format!("size {v} exceeds platform usize")))
}
