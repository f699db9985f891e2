//! Dense little-endian `f32` matrix file.
//!
//! Layout: magic `RELF`, `u32` version, `u64` rows, `u64` dim, then
//! `rows * dim` `f32` values in row-major order and nothing else.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"RELF";
pub const FEATURE_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 8 + 8;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStore {
    rows: usize,
    dim: usize,
    data: Vec<f32>,
}

impl FeatureStore {
    pub fn new(dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("feature dimension must be positive"));
        }
        if data.len() % dim != 0 {
            return Err(Error::invalid(format!(
                "{} values do not form rows of length {dim}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite feature value"));
        }
        Ok(Self {
            rows: data.len() / dim,
            dim,
            data,
        })
    }

    /// Rounds every value to `f32`.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: bad.len(),
            });
        }
        Self::new(dim, rows.iter().flatten().map(|&v| v as f32).collect())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> Option<&[f32]> {
        (i < self.rows).then(|| &self.data[i * self.dim..(i + 1) * self.dim])
    }

    pub fn row_f64(&self, i: usize) -> Result<Vec<f64>> {
        self.row(i)
            .map(|r| r.iter().map(|&v| f64::from(v)).collect())
            .ok_or_else(|| Error::invalid(format!("feature row {i} out of range ({} rows)", self.rows)))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(FEATURE_MAGIC);
        out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.rows as u64).to_le_bytes());
        out.extend_from_slice(&(self.dim as u64).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parses a store; `path` only labels errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |msg: String| Error::Format {
            path: path.to_path_buf(),
            msg,
        };
        if bytes.len() < HEADER_LEN || &bytes[..4] != FEATURE_MAGIC {
            return Err(bad("not a RELF feature file".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FEATURE_VERSION {
            return Err(Error::VersionMismatch {
                expected: FEATURE_VERSION,
                found: version,
            });
        }
        let rows = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let dim = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
        let payload = &bytes[HEADER_LEN..];
        let expected = rows.checked_mul(dim).and_then(|n| n.checked_mul(4));
        if expected != Some(payload.len() as u64) {
            return Err(bad(format!(
                "header declares {rows} x {dim} f32 values but payload has {} bytes",
                payload.len()
            )));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if dim == 0 {
            return Err(bad("zero feature dimension".into()));
        }
        Self::new(dim as usize, data).map_err(|e| bad(e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_layout() {
        let store = FeatureStore::new(3, vec![1.0, -2.5, 0.0, 4.0, 5.0, 6.25]).unwrap();
        let bytes = store.to_bytes();
        assert_eq!(&bytes[..4], b"RELF");
        assert_eq!(bytes.len(), 24 + 6 * 4);
        assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 2);
        let back = FeatureStore::from_bytes(&bytes, Path::new("f")).unwrap();
        assert_eq!(back, store);
        assert_eq!(back.row(1).unwrap(), &[4.0, 5.0, 6.25]);
        assert!(back.row(2).is_none());
    }

    #[test]
    fn rejects_bad_files() {
        let store = FeatureStore::new(2, vec![1.0; 4]).unwrap();
        let bytes = store.to_bytes();
        let p = Path::new("f");
        assert!(FeatureStore::from_bytes(&bytes[..bytes.len() - 1], p).is_err());
        let mut extra = bytes.clone();
        extra.extend_from_slice(&[0; 4]);
        assert!(FeatureStore::from_bytes(&extra, p).is_err());
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(FeatureStore::from_bytes(&magic, p).is_err());
        let mut version = bytes;
        version[4] = 9;
        assert!(matches!(
            FeatureStore::from_bytes(&version, p),
            Err(Error::VersionMismatch { found: 9, .. })
        ));
    }
}
