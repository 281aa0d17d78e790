use crate::error::{Error, Result};
use crate::linalg::{singular_values, Matrix};
use crate::scalar::Real;

/// Canonical angles between two equal-rank subspaces, ascending, in `[0, π/2]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PrincipalAngles<T> {
    pub angles: Vec<T>,
}

impl<T: Real> PrincipalAngles<T> {
    /// `Σ sin²θᵢ`, the squared chordal distance.
    pub fn sum_sin_squared(&self) -> T {
        self.angles.iter().map(|&a| a.sin() * a.sin()).sum()
    }

    pub fn max(&self) -> T {
        self.angles.last().copied().unwrap_or_else(T::zero)
    }

    pub fn max_degrees(&self) -> T {
        self.max().to_degrees()
    }
}

/// Angles from the singular values of `A Bᵀ`, clamped into `[0, 1]` before `acos`.
///
/// Both bases must be r×d with orthonormal rows.
pub fn principal_angles<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<PrincipalAngles<T>> {
    if a.shape() != b.shape() {
        return Err(Error::DimensionMismatch(format!(
            "bases {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let product = a.matmul_t(b)?;
    let sigma = singular_values(&product)?;
    let angles = sigma
        .into_iter()
        .map(|s| s.max(T::zero()).min(T::one()).acos())
        .collect();
    Ok(PrincipalAngles { angles })
}
