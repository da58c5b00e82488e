//! EMBF: the binary interchange format for embedding sets.
//!
//! Layout, all little-endian:
//!
//! | offset | size | field                          |
//! |--------|------|--------------------------------|
//! | 0      | 4    | magic `b"EMBF"`                |
//! | 4      | 4    | version `u32` (= 1)            |
//! | 8      | 8    | count `u64`                    |
//! | 16     | 4    | dim `u32`                      |
//! | 20     | 1    | dtype `u8` (0 = f32)           |
//! | 21     | 1    | flags `u8` (bit 0 = normalized)|
//! | 22     | 2    | reserved `u16` (= 0)           |
//! | 24     | ...  | `count × dim` f32, row-major   |

use alloc::vec::Vec;

use thiserror::Error;

use crate::embedding::{EmbeddingError, EmbeddingSet};

pub const MAGIC: [u8; 4] = *b"EMBF";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 24;
pub const DTYPE_F32: u8 = 0;
pub const FLAG_NORMALIZED: u8 = 1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EmbfError {
    #[error("bad magic {0:?}, expected \"EMBF\"")]
    BadMagic([u8; 4]),
    #[error("unsupported EMBF version {0}")]
    VersionMismatch(u32),
    #[error("unsupported dtype {0}")]
    UnsupportedDtype(u8),
    #[error("reserved header bits set (flags {flags:#04x}, reserved {reserved:#06x})")]
    ReservedBits { flags: u8, reserved: u16 },
    #[error("truncated: expected {expected} bytes, found {actual}")]
    Truncated { expected: u64, actual: u64 },
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(u64),
    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("invalid embedding set: {0}")]
    Invalid(EmbeddingError),
}

impl From<EmbeddingError> for EmbfError {
    fn from(e: EmbeddingError) -> Self {
        match e {
            EmbeddingError::NonFinite { row, col } => EmbfError::NonFinite { row, col },
            other => EmbfError::Invalid(other),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EmbfHeader {
    pub count: u64,
    pub dim: u32,
    pub normalized: bool,
}

impl EmbfHeader {
    pub fn payload_len(&self) -> u64 {
        self.count * u64::from(self.dim) * 4
    }

    pub fn encode(&self) -> [u8; HEADER_LEN] {
        let mut h = [0u8; HEADER_LEN];
        h[0..4].copy_from_slice(&MAGIC);
        h[4..8].copy_from_slice(&VERSION.to_le_bytes());
        h[8..16].copy_from_slice(&self.count.to_le_bytes());
        h[16..20].copy_from_slice(&self.dim.to_le_bytes());
        h[20] = DTYPE_F32;
        h[21] = if self.normalized { FLAG_NORMALIZED } else { 0 };
        h
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, EmbfError> {
        if bytes.len() >= 4 && bytes[0..4] != MAGIC {
            let mut m = [0u8; 4];
            m.copy_from_slice(&bytes[0..4]);
            return Err(EmbfError::BadMagic(m));
        }
        if bytes.len() < HEADER_LEN {
            return Err(EmbfError::Truncated {
                expected: HEADER_LEN as u64,
                actual: bytes.len() as u64,
            });
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(EmbfError::VersionMismatch(version));
        }
        let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let dim = u32::from_le_bytes(bytes[16..20].try_into().unwrap());
        let dtype = bytes[20];
        if dtype != DTYPE_F32 {
            return Err(EmbfError::UnsupportedDtype(dtype));
        }
        let flags = bytes[21];
        let reserved = u16::from_le_bytes(bytes[22..24].try_into().unwrap());
        if flags & !FLAG_NORMALIZED != 0 || reserved != 0 {
            return Err(EmbfError::ReservedBits { flags, reserved });
        }
        Ok(Self {
            count,
            dim,
            normalized: flags & FLAG_NORMALIZED != 0,
        })
    }
}

pub fn encode(set: &EmbeddingSet) -> Vec<u8> {
    let header = EmbfHeader {
        count: set.count() as u64,
        dim: set.dim() as u32,
        normalized: set.is_normalized(),
    };
    let mut out = Vec::with_capacity(HEADER_LEN + set.data().len() * 4);
    out.extend_from_slice(&header.encode());
    for v in set.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<EmbeddingSet, EmbfError> {
    let header = EmbfHeader::decode(bytes)?;
    let expected = HEADER_LEN as u64 + header.payload_len();
    let actual = bytes.len() as u64;
    if actual < expected {
        return Err(EmbfError::Truncated { expected, actual });
    }
    if actual > expected {
        return Err(EmbfError::TrailingBytes(actual - expected));
    }
    let data: Vec<f32> = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(EmbeddingSet::new(
        header.count as usize,
        header.dim as usize,
        data,
        header.normalized,
    )?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn smallest_set_layout() {
        let s = EmbeddingSet::new(1, 1, vec![0.5], false).unwrap();
        let bytes = encode(&s);
        assert_eq!(bytes.len(), HEADER_LEN + 4);
        assert_eq!(&bytes[0..4], b"EMBF");
        assert_eq!(&bytes[24..28], &0.5f32.to_le_bytes());
        assert_eq!(decode(&bytes).unwrap(), s);
    }

    #[test]
    fn two_by_three_round_trip() {
        let s = EmbeddingSet::new(2, 3, vec![1.0, -2.0, 3.5, 0.0, 1e-30, -7.25], false).unwrap();
        let back = decode(&encode(&s)).unwrap();
        assert_eq!(back.count(), 2);
        assert_eq!(back.dim(), 3);
        assert_eq!(back, s);
    }

    #[test]
    fn bad_magic() {
        let mut bytes = encode(&EmbeddingSet::new(1, 1, vec![0.5], false).unwrap());
        bytes[0..4].copy_from_slice(b"XXXX");
        assert_eq!(decode(&bytes), Err(EmbfError::BadMagic(*b"XXXX")));
    }

    #[test]
    fn version_mismatch() {
        let mut bytes = encode(&EmbeddingSet::new(1, 1, vec![0.5], false).unwrap());
        bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert_eq!(decode(&bytes), Err(EmbfError::VersionMismatch(2)));
    }

    #[test]
    fn truncated_payload() {
        let s = EmbeddingSet::new(5, 2, vec![1.0; 10], false).unwrap();
        let mut bytes = encode(&s);
        bytes[8..16].copy_from_slice(&10u64.to_le_bytes());
        assert_eq!(
            decode(&bytes),
            Err(EmbfError::Truncated {
                expected: 24 + 80,
                actual: 24 + 40
            })
        );
        assert!(matches!(
            decode(&bytes[..10]),
            Err(EmbfError::Truncated { .. })
        ));
    }

    #[test]
    fn non_finite_payload() {
        let mut bytes = encode(&EmbeddingSet::new(1, 2, vec![0.5, 0.5], false).unwrap());
        bytes[28..32].copy_from_slice(&f32::INFINITY.to_le_bytes());
        assert_eq!(decode(&bytes), Err(EmbfError::NonFinite { row: 0, col: 1 }));
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut bytes = encode(&EmbeddingSet::new(1, 1, vec![0.5], false).unwrap());
        bytes.push(0);
        assert_eq!(decode(&bytes), Err(EmbfError::TrailingBytes(1)));
    }

    #[test]
    fn normalized_flag_survives() {
        let s = EmbeddingSet::new(1, 2, vec![0.6, 0.8], true).unwrap();
        let bytes = encode(&s);
        assert_eq!(bytes[21], FLAG_NORMALIZED);
        assert!(decode(&bytes).unwrap().is_normalized());
    }
}
