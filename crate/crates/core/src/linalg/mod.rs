//! Dense linear algebra: matrices, symmetric eigendecomposition, small SVD and principal angles.

mod angles;
mod eig;
mod matrix;
mod svd;

pub use angles::{principal_angles, PrincipalAngles};
pub use eig::{sym_eig, EigenPairs, SymMatrix, MAX_SWEEPS};
pub use matrix::Matrix;
pub use svd::{singular_values, svd_small, Svd, MAX_SVD_SIZE};
