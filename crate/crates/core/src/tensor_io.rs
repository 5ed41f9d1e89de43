//! Binary tensor archive: a JSON manifest followed by a flat blob.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"TNSR"            4 bytes
//! version u32                currently 1
//! mlen    u64                manifest length in bytes
//! manifest UTF-8 JSON        {"format_version", "config", "tensors": [...]}
//! blob    raw IEEE-754 LE    tensors packed in manifest order
//! ```
//!
//! Each manifest entry carries `{name, shape, dtype, byte_offset}` with the
//! offset relative to the blob start. Save followed by load is bit-exact.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::Matrix;
use crate::real::{Dtype, Real};

pub const MAGIC: &[u8; 4] = b"TNSR";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TensorIoError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a tensor archive (bad magic)")]
    BadMagic,
    #[error("unsupported format version {got} (expected {expected})")]
    VersionMismatch { got: u32, expected: u32 },
    #[error("corrupt archive: {0}")]
    Corrupt(String),
    #[error("manifest error: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("tensor {name}: expected dtype {expected}, found {found}")]
    DtypeMismatch {
        name: String,
        expected: Dtype,
        found: Dtype,
    },
    #[error("tensor {name}: shape mismatch (manifest {manifest:?}, expected {expected:?})")]
    ShapeMismatch {
        name: String,
        manifest: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("missing tensor {0}")]
    MissingTensor(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    dtype: Dtype,
    byte_offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    config: serde_json::Value,
    tensors: Vec<ManifestEntry>,
}

#[derive(Debug, Clone)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: Dtype,
    /// Raw little-endian element bytes.
    pub bytes: Vec<u8>,
}

impl TensorEntry {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn to_values<T: Real>(&self) -> Result<Vec<T>, TensorIoError> {
        if self.dtype != T::DTYPE {
            return Err(TensorIoError::DtypeMismatch {
                name: self.name.clone(),
                expected: T::DTYPE,
                found: self.dtype,
            });
        }
        let w = T::DTYPE.size_bytes();
        Ok(self.bytes.chunks_exact(w).map(T::read_le).collect())
    }
}

/// In-memory tensor archive with a free-form JSON `config` section.
#[derive(Debug, Clone)]
pub struct TensorArchive {
    pub config: serde_json::Value,
    entries: Vec<TensorEntry>,
    index: BTreeMap<String, usize>,
}

impl TensorArchive {
    pub fn new(config: serde_json::Value) -> Self {
        Self {
            config,
            entries: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn push_values<T: Real>(&mut self, name: &str, shape: Vec<usize>, values: &[T]) {
        assert_eq!(
            shape.iter().product::<usize>(),
            values.len(),
            "tensor {name}: shape does not match value count"
        );
        assert!(
            !self.index.contains_key(name),
            "duplicate tensor name {name}"
        );
        let mut bytes = Vec::with_capacity(values.len() * T::DTYPE.size_bytes());
        for v in values {
            v.write_le(&mut bytes);
        }
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(TensorEntry {
            name: name.to_string(),
            shape,
            dtype: T::DTYPE,
            bytes,
        });
    }

    pub fn push_matrix<T: Real>(&mut self, name: &str, m: &Matrix<T>) {
        self.push_values(name, vec![m.rows(), m.cols()], m.data());
    }

    pub fn push_vector<T: Real>(&mut self, name: &str, v: &[T]) {
        self.push_values(name, vec![v.len()], v);
    }

    pub fn get(&self, name: &str) -> Result<&TensorEntry, TensorIoError> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i])
            .ok_or_else(|| TensorIoError::MissingTensor(name.to_string()))
    }

    pub fn vector<T: Real>(&self, name: &str) -> Result<Vec<T>, TensorIoError> {
        self.get(name)?.to_values()
    }

    pub fn matrix<T: Real>(&self, name: &str) -> Result<Matrix<T>, TensorIoError> {
        let e = self.get(name)?;
        if e.shape.len() != 2 {
            return Err(TensorIoError::ShapeMismatch {
                name: name.to_string(),
                manifest: e.shape.clone(),
                expected: vec![0, 0],
            });
        }
        Ok(Matrix::from_vec(e.shape[0], e.shape[1], e.to_values()?))
    }

    pub fn matrix_expect<T: Real>(
        &self,
        name: &str,
        rows: usize,
        cols: usize,
    ) -> Result<Matrix<T>, TensorIoError> {
        let e = self.get(name)?;
        if e.shape != [rows, cols] {
            return Err(TensorIoError::ShapeMismatch {
                name: name.to_string(),
                manifest: e.shape.clone(),
                expected: vec![rows, cols],
            });
        }
        self.matrix(name)
    }

    /// FNV-1a over the packed blob; stable fingerprint of the tensor contents.
    pub fn blob_checksum(&self) -> u64 {
        let mut h = crate::fnv1a64_init();
        for e in &self.entries {
            h = crate::fnv1a64_update(h, e.name.as_bytes());
            h = crate::fnv1a64_update(h, &e.bytes);
        }
        h
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0u64;
        let tensors: Vec<ManifestEntry> = self
            .entries
            .iter()
            .map(|e| {
                let entry = ManifestEntry {
                    name: e.name.clone(),
                    shape: e.shape.clone(),
                    dtype: e.dtype,
                    byte_offset: offset,
                };
                offset += e.bytes.len() as u64;
                entry
            })
            .collect();
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            config: self.config.clone(),
            tensors,
        };
        let mjson = serde_json::to_vec(&manifest).expect("manifest serialization");

        let mut out = Vec::with_capacity(16 + mjson.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(mjson.len() as u64).to_le_bytes());
        out.extend_from_slice(&mjson);
        for e in &self.entries {
            out.extend_from_slice(&e.bytes);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TensorIoError> {
        if bytes.len() < 16 || &bytes[0..4] != MAGIC {
            return Err(TensorIoError::BadMagic);
        }
        let version = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]);
        if version != FORMAT_VERSION {
            return Err(TensorIoError::VersionMismatch {
                got: version,
                expected: FORMAT_VERSION,
            });
        }
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        if bytes.len() < 16 + mlen {
            return Err(TensorIoError::Corrupt("truncated manifest".into()));
        }
        let manifest: Manifest = serde_json::from_slice(&bytes[16..16 + mlen])?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(TensorIoError::VersionMismatch {
                got: manifest.format_version,
                expected: FORMAT_VERSION,
            });
        }
        let blob = &bytes[16 + mlen..];

        let mut expected_offset = 0u64;
        let mut entries = Vec::with_capacity(manifest.tensors.len());
        let mut index = BTreeMap::new();
        for m in &manifest.tensors {
            if m.byte_offset != expected_offset {
                return Err(TensorIoError::Corrupt(format!(
                    "tensor {}: byte_offset {} does not match packed position {expected_offset}",
                    m.name, m.byte_offset
                )));
            }
            let nbytes = m.shape.iter().product::<usize>() * m.dtype.size_bytes();
            let start = m.byte_offset as usize;
            let end = start + nbytes;
            if end > blob.len() {
                return Err(TensorIoError::Corrupt(format!(
                    "tensor {}: blob truncated ({} bytes needed, {} available)",
                    m.name,
                    end,
                    blob.len()
                )));
            }
            if index.contains_key(&m.name) {
                return Err(TensorIoError::Corrupt(format!(
                    "duplicate tensor name {}",
                    m.name
                )));
            }
            index.insert(m.name.clone(), entries.len());
            entries.push(TensorEntry {
                name: m.name.clone(),
                shape: m.shape.clone(),
                dtype: m.dtype,
                bytes: blob[start..end].to_vec(),
            });
            expected_offset += nbytes as u64;
        }
        if expected_offset as usize != blob.len() {
            return Err(TensorIoError::Corrupt(format!(
                "blob length {} does not match manifest total {expected_offset}",
                blob.len()
            )));
        }

        Ok(Self {
            config: manifest.config,
            entries,
            index,
        })
    }

    pub fn write(&self, path: &Path) -> Result<(), TensorIoError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, TensorIoError> {
        let mut f = std::fs::File::open(path)?;
        let mut bytes = Vec::new();
        f.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}
