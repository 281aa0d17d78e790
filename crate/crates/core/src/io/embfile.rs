//! `SEB1` embedding files.
//!
//! ```text
//! "SEB1" | version u32 | row_count u32 | dim u32 | dtype u8 | row-major f32 payload
//! [ "LBL1" | row_count u32 | u32 labels ]
//! ```
//!
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::{norm, Real};

pub const MAGIC: &[u8; 4] = b"SEB1";
pub const LABEL_MAGIC: &[u8; 4] = b"LBL1";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;
const HEADER_LEN: usize = 17;

/// Rows are warned about when their norm is further than this from one.
pub const NORM_WARN_TOL: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingFile {
    pub rows: usize,
    pub dim: usize,
    pub data: Vec<f32>,
    pub labels: Option<Vec<u32>>,
}

impl EmbeddingFile {
    pub fn new(rows: usize, dim: usize, data: Vec<f32>, labels: Option<Vec<u32>>) -> Result<Self> {
        if rows == 0 || dim == 0 {
            return Err(Error::DimensionMismatch(format!("empty embedding block {rows}x{dim}")));
        }
        if data.len() != rows * dim {
            return Err(Error::DimensionMismatch(format!("{} values for {rows}x{dim}", data.len())));
        }
        if labels.as_ref().is_some_and(|l| l.len() != rows) {
            return Err(Error::DimensionMismatch(format!("label count differs from {rows} rows")));
        }
        Ok(Self { rows, dim, data, labels })
    }

    /// Rounds each entry to `f32`.
    pub fn from_matrix<T: Real>(m: &Matrix<T>, labels: Option<&[usize]>) -> Result<Self> {
        let data = m.as_slice().iter().map(|x| x.as_f64() as f32).collect();
        let labels = labels.map(|l| l.iter().map(|&y| y as u32).collect());
        Self::new(m.rows(), m.cols(), data, labels)
    }

    /// Exact widening of the stored values.
    pub fn to_matrix<T: Real>(&self) -> Matrix<T> {
        let data = self.data.iter().map(|&x| T::of(x as f64)).collect();
        Matrix::from_vec(self.rows, self.dim, data).expect("validated shape")
    }

    /// Widened matrix with every row rescaled to unit norm; warns when a stored
    /// row was off by more than [`NORM_WARN_TOL`]. Zero rows are left alone.
    pub fn unit_rows<T: Real>(&self) -> Matrix<T> {
        let mut m = self.to_matrix::<T>();
        let mut off = 0;
        for i in 0..m.rows() {
            let row = m.row_mut(i);
            let n = norm(row);
            if (n.as_f64() - 1.0).abs() > NORM_WARN_TOL {
                off += 1;
            }
            if n > T::zero() {
                row.iter_mut().for_each(|x| *x /= n);
            }
        }
        if off > 0 {
            log::warn!("{off} of {} rows were not unit-norm and have been rescaled", m.rows());
        }
        m
    }

    pub fn labels_usize(&self) -> Option<Vec<usize>> {
        self.labels.as_ref().map(|l| l.iter().map(|&y| y as usize).collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let label_len = self.labels.as_ref().map_or(0, |l| 8 + 4 * l.len());
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.data.len() + label_len);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.rows as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.push(DTYPE_F32);
        for x in &self.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
        if let Some(labels) = &self.labels {
            out.extend_from_slice(LABEL_MAGIC);
            out.extend_from_slice(&(labels.len() as u32).to_le_bytes());
            for y in labels {
                out.extend_from_slice(&y.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let format = |msg: String| Error::Format {
            path: path.to_path_buf(),
            msg,
        };
        let truncated = |expected: usize| Error::Truncation {
            path: path.to_path_buf(),
            expected: expected as u64,
            actual: bytes.len() as u64,
        };
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(format("bad magic, expected SEB1".into()));
        }
        if bytes.len() < HEADER_LEN {
            return Err(truncated(HEADER_LEN));
        }
        let version = u32_at(bytes, 4);
        if version != VERSION {
            return Err(format(format!("unsupported version {version}")));
        }
        let rows = u32_at(bytes, 8) as usize;
        let dim = u32_at(bytes, 12) as usize;
        let dtype = bytes[16];
        if dtype != DTYPE_F32 {
            return Err(Error::UnsupportedDtype {
                path: path.to_path_buf(),
                dtype,
            });
        }
        if rows == 0 || dim == 0 {
            return Err(format(format!("empty shape {rows}x{dim}")));
        }
        let payload_end = HEADER_LEN + rows * dim * 4;
        if bytes.len() < payload_end {
            return Err(truncated(payload_end));
        }
        let data = bytes[HEADER_LEN..payload_end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();

        let labels = if bytes.len() == payload_end {
            None
        } else {
            let rest = &bytes[payload_end..];
            if rest.len() < 4 || &rest[..4] != LABEL_MAGIC {
                return Err(format("trailing bytes are not a LBL1 block".into()));
            }
            if rest.len() < 8 {
                return Err(truncated(payload_end + 8));
            }
            let count = u32_at(rest, 4) as usize;
            if count != rows {
                return Err(format(format!("{count} labels for {rows} rows")));
            }
            let end = payload_end + 8 + 4 * count;
            if bytes.len() < end {
                return Err(truncated(end));
            }
            if bytes.len() > end {
                return Err(format(format!("{} trailing bytes after labels", bytes.len() - end)));
            }
            Some((0..count).map(|i| u32_at(rest, 8 + 4 * i)).collect())
        };
        Ok(Self { rows, dim, data, labels })
    }
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingFile> {
    let bytes = fs::read(path)?;
    EmbeddingFile::from_bytes(&bytes, path)
}

pub fn write_embeddings(path: &Path, file: &EmbeddingFile) -> Result<()> {
    super::atomic_write(path, &file.to_bytes())
}
