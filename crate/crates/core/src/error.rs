use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid matrix: {0}")]
    InvalidMatrix(String),

    #[error("no convergence after {sweeps} sweeps (residual {residual:e})")]
    NoConvergence { sweeps: usize, residual: f64 },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("degenerate anchors: {0}")]
    DegenerateAnchors(String),

    #[error("rank {rank} exceeds ambient dimension {dim}")]
    RankTooLarge { rank: usize, dim: usize },

    #[error("numerical blowup in {0}")]
    NumericalBlowup(&'static str),

    #[error("matrix is not orthogonal (max deviation {0:e})")]
    InvalidRotation(f64),

    #[error("degenerate embedding at row {0}")]
    DegenerateEmbedding(usize),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{path}: format error: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("{path}: truncated payload: expected {expected} bytes, found {actual}")]
    Truncation {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },

    #[error("{path}: unsupported dtype {dtype}")]
    UnsupportedDtype { path: PathBuf, dtype: u8 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
