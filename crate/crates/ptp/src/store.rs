//! The PTPE embedding store: a fixed 20-byte header followed by a row-major
//! matrix, with a sidecar JSON manifest.

use std::fmt;
use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use ptp_core::tensorad::Tensor;
use serde::{Deserialize, Serialize};

pub const MAGIC: [u8; 4] = *b"PTPE";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 20;

/// Element encoding on disk. Embedding stores use `F32`; checkpoints use
/// `F64` so trained parameters survive a save/load exactly.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32 = 1,
    F64 = 2,
}

impl Dtype {
    fn from_byte(b: u8) -> Option<Self> {
        match b {
            1 => Some(Dtype::F32),
            2 => Some(Dtype::F64),
            _ => None,
        }
    }

    pub fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug)]
pub enum StoreError {
    Io { path: PathBuf, source: io::Error },
    BadMagic { path: PathBuf, found: [u8; 4] },
    Version { path: PathBuf, found: u32 },
    Dtype { path: PathBuf, found: u8 },
    Truncated { path: PathBuf, expected: u64, found: u64 },
    DimMismatch { path: PathBuf, expected: usize, found: usize },
    LabelMismatch { path: PathBuf, rows: usize, labels: usize },
    Manifest { path: PathBuf, message: String },
}

impl StoreError {
    /// Stable short name of the failure kind.
    pub fn code(&self) -> &'static str {
        match self {
            StoreError::Io { .. } => "io",
            StoreError::BadMagic { .. } => "bad-magic",
            StoreError::Version { .. } => "version",
            StoreError::Dtype { .. } => "dtype",
            StoreError::Truncated { .. } => "truncated",
            StoreError::DimMismatch { .. } => "dim-mismatch",
            StoreError::LabelMismatch { .. } => "label-mismatch",
            StoreError::Manifest { .. } => "manifest",
        }
    }

    fn io(path: &Path, source: io::Error) -> Self {
        StoreError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

impl fmt::Display for StoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StoreError::Io { path, source } => write!(f, "{}: {source}", path.display()),
            StoreError::BadMagic { path, found } => {
                write!(f, "{}: not a PTPE store (magic {found:?})", path.display())
            }
            StoreError::Version { path, found } => {
                write!(f, "{}: unsupported store version {found} (expected {VERSION})", path.display())
            }
            StoreError::Dtype { path, found } => write!(f, "{}: unknown dtype byte {found}", path.display()),
            StoreError::Truncated { path, expected, found } => {
                write!(f, "{}: expected {expected} bytes, found {found}", path.display())
            }
            StoreError::DimMismatch { path, expected, found } => {
                write!(f, "{}: dimension {found}, expected {expected}", path.display())
            }
            StoreError::LabelMismatch { path, rows, labels } => {
                write!(f, "{}: {rows} rows but {labels} labels", path.display())
            }
            StoreError::Manifest { path, message } => write!(f, "{}: bad manifest: {message}", path.display()),
        }
    }
}

impl std::error::Error for StoreError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            StoreError::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

/// A dense matrix as read from or written to a store.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub dim: usize,
    pub dtype: Dtype,
    /// Row-major values, widened to f64.
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, dim: usize, dtype: Dtype, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * dim, "matrix data does not match its shape");
        Self { rows, dim, dtype, data }
    }

    pub fn from_tensor(t: &Tensor, dtype: Dtype) -> Self {
        let rows = t.shape().first().copied().unwrap_or(1);
        let dim = if rows == 0 { t.shape()[1..].iter().product() } else { t.len() / rows };
        Self::new(rows, dim, dtype, t.data().to_vec())
    }

    pub fn to_tensor(&self) -> Result<Tensor, ptp_core::Error> {
        Tensor::new(&[self.rows, self.dim], self.data.clone())
    }

    fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.data.len() * self.dtype.width());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.rows as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.push(self.dtype as u8);
        out.extend_from_slice(&[0; 3]);
        match self.dtype {
            Dtype::F32 => self.data.iter().for_each(|v| out.extend_from_slice(&(*v as f32).to_le_bytes())),
            Dtype::F64 => self.data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        }
        out
    }
}

/// Header fields of a store file.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Header {
    pub rows: usize,
    pub dim: usize,
    pub dtype: Dtype,
}

fn parse_header(path: &Path, bytes: &[u8; HEADER_LEN]) -> Result<Header, StoreError> {
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(StoreError::BadMagic {
            path: path.to_path_buf(),
            found: magic,
        });
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    if word(4) != VERSION {
        return Err(StoreError::Version {
            path: path.to_path_buf(),
            found: word(4),
        });
    }
    let dtype = Dtype::from_byte(bytes[16]).ok_or(StoreError::Dtype {
        path: path.to_path_buf(),
        found: bytes[16],
    })?;
    Ok(Header {
        rows: word(8) as usize,
        dim: word(12) as usize,
        dtype,
    })
}

/// Reads a matrix file. The header is checked, and the file length compared
/// with it, before any matrix bytes are read.
pub fn read_matrix(path: &Path) -> Result<Matrix, StoreError> {
    let mut file = fs::File::open(path).map_err(|e| StoreError::io(path, e))?;
    let len = file.metadata().map_err(|e| StoreError::io(path, e))?.len();
    let mut head = [0u8; HEADER_LEN];
    if len < HEADER_LEN as u64 {
        return Err(StoreError::Truncated {
            path: path.to_path_buf(),
            expected: HEADER_LEN as u64,
            found: len,
        });
    }
    file.read_exact(&mut head).map_err(|e| StoreError::io(path, e))?;
    let header = parse_header(path, &head)?;
    let expected = HEADER_LEN as u64 + (header.rows * header.dim * header.dtype.width()) as u64;
    if len != expected {
        return Err(StoreError::Truncated {
            path: path.to_path_buf(),
            expected,
            found: len,
        });
    }
    let mut body = vec![0u8; (expected - HEADER_LEN as u64) as usize];
    file.read_exact(&mut body).map_err(|e| StoreError::io(path, e))?;
    let data = match header.dtype {
        Dtype::F32 => body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        Dtype::F64 => body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
    };
    Ok(Matrix::new(header.rows, header.dim, header.dtype, data))
}

/// Writes to a temporary sibling and renames it into place.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(|e| StoreError::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| StoreError::io(&tmp, e))?;
    f.sync_all().map_err(|e| StoreError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| StoreError::io(path, e))
}

pub fn write_matrix(path: &Path, matrix: &Matrix) -> Result<(), StoreError> {
    write_atomic(path, &matrix.encode())
}

/// Sidecar manifest of an embedding store.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    /// Category names; position is the label index.
    pub classes: Vec<String>,
    /// One label per store row.
    pub labels: Vec<usize>,
    pub split: String,
    /// Tag of whatever produced the vectors.
    pub encoder: String,
    pub l2_normalized: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingStore {
    pub matrix: Matrix,
    pub manifest: Manifest,
}

/// `train.ptpe` -> `train.json`
pub fn manifest_path(store: &Path) -> PathBuf {
    store.with_extension("json")
}

impl EmbeddingStore {
    fn check(&self, path: &Path) -> Result<(), StoreError> {
        if self.manifest.labels.len() != self.matrix.rows {
            return Err(StoreError::LabelMismatch {
                path: path.to_path_buf(),
                rows: self.matrix.rows,
                labels: self.manifest.labels.len(),
            });
        }
        let classes = self.manifest.classes.len();
        if let Some(bad) = self.manifest.labels.iter().find(|&&l| l >= classes) {
            return Err(StoreError::Manifest {
                path: manifest_path(path),
                message: format!("label {bad} outside {classes} classes"),
            });
        }
        Ok(())
    }
}

/// Writes `path` and its sidecar manifest.
pub fn save_store(path: &Path, store: &EmbeddingStore) -> Result<(), StoreError> {
    store.check(path)?;
    write_matrix(path, &store.matrix)?;
    let json = serde_json::to_vec_pretty(&store.manifest).expect("manifest serializes");
    write_atomic(&manifest_path(path), &json)
}

/// Loads a store and its manifest. With `expected_dim`, a store of another
/// width is rejected.
pub fn load_store(path: &Path, expected_dim: Option<usize>) -> Result<EmbeddingStore, StoreError> {
    let matrix = read_matrix(path)?;
    if let Some(d) = expected_dim {
        if matrix.dim != d {
            return Err(StoreError::DimMismatch {
                path: path.to_path_buf(),
                expected: d,
                found: matrix.dim,
            });
        }
    }
    let mpath = manifest_path(path);
    let text = fs::read(&mpath).map_err(|e| StoreError::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_slice(&text).map_err(|e| StoreError::Manifest {
        path: mpath.clone(),
        message: e.to_string(),
    })?;
    let store = EmbeddingStore { matrix, manifest };
    store.check(path)?;
    Ok(store)
}
