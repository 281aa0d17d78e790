//! Symmetric eigendecomposition by cyclic Jacobi rotations.

use std::ops::Deref;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Real;

/// Sweep budget for the cyclic Jacobi solver.
pub const MAX_SWEEPS: usize = 100;

/// A finite, square, symmetric matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SymMatrix<T>(Matrix<T>);

impl<T: Real> SymMatrix<T> {
    /// Validates squareness, finiteness and symmetry (relative to the largest entry).
    pub fn new(m: Matrix<T>) -> Result<Self> {
        let (rows, cols) = m.shape();
        if rows != cols || rows == 0 {
            return Err(Error::InvalidMatrix(format!(
                "expected a non-empty square matrix, got {rows}x{cols}"
            )));
        }
        if !m.is_finite() {
            return Err(Error::InvalidMatrix("non-finite entry".into()));
        }
        let scale = m
            .as_slice()
            .iter()
            .fold(T::zero(), |acc, x| acc.max(x.abs()));
        let tol = T::symmetry_tol() * scale;
        for i in 0..rows {
            for j in 0..i {
                if (m[(i, j)] - m[(j, i)]).abs() > tol {
                    return Err(Error::InvalidMatrix(format!(
                        "asymmetric at ({i},{j}): {} vs {}",
                        m[(i, j)],
                        m[(j, i)]
                    )));
                }
            }
        }
        Ok(Self(m))
    }

    /// Replaces `m` by `(m + mᵀ)/2`, so the result is exactly symmetric.
    pub fn symmetrized(m: Matrix<T>) -> Result<Self> {
        let (rows, cols) = m.shape();
        if rows != cols {
            return Err(Error::InvalidMatrix(format!("{rows}x{cols} is not square")));
        }
        let mut m = m;
        let half = T::of(0.5);
        for i in 0..rows {
            for j in 0..i {
                let avg = (m[(i, j)] + m[(j, i)]) * half;
                m[(i, j)] = avg;
                m[(j, i)] = avg;
            }
        }
        Self::new(m)
    }

    pub fn zeros(dim: usize) -> Self {
        Self(Matrix::zeros(dim, dim))
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.0.rows()
    }

    pub fn matrix(&self) -> &Matrix<T> {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix<T> {
        self.0
    }
}

impl<T> Deref for SymMatrix<T> {
    type Target = Matrix<T>;

    fn deref(&self) -> &Matrix<T> {
        &self.0
    }
}

/// Full spectrum of a symmetric matrix: values descending, eigenvectors in columns.
#[derive(Clone, Debug)]
pub struct EigenPairs<T> {
    pub values: Vec<T>,
    pub vectors: Matrix<T>,
    pub sweeps: usize,
}

impl<T: Real> EigenPairs<T> {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn vector(&self, j: usize) -> Vec<T> {
        self.vectors.column(j)
    }

    /// The leading `r` eigenvectors stacked as rows (an r×d basis).
    pub fn top_rows(&self, r: usize) -> Matrix<T> {
        let d = self.dim();
        let mut basis = Matrix::zeros(r, d);
        for k in 0..r {
            for i in 0..d {
                basis[(k, i)] = self.vectors[(i, k)];
            }
        }
        basis
    }

    /// `U diag(λ) Uᵀ`.
    pub fn reconstruct(&self) -> Matrix<T> {
        let d = self.dim();
        let mut out = Matrix::zeros(d, d);
        for k in 0..d {
            let lambda = self.values[k];
            for i in 0..d {
                let a = self.vectors[(i, k)] * lambda;
                for j in 0..d {
                    out[(i, j)] += a * self.vectors[(j, k)];
                }
            }
        }
        out
    }
}

fn off_diagonal_norm<T: Real>(a: &Matrix<T>) -> T {
    let n = a.rows();
    let mut acc = T::zero();
    for i in 0..n {
        for j in 0..n {
            if i != j {
                acc += a[(i, j)] * a[(i, j)];
            }
        }
    }
    acc.sqrt()
}

/// Eigendecomposition of a symmetric matrix.
///
/// Rotations visit `(p, q)` pairs in row-cyclic order, so the result is a
/// deterministic function of the input. Each eigenvector is signed so that
/// its largest-magnitude entry (lowest index on ties) is positive.
pub fn sym_eig<T: Real>(m: &SymMatrix<T>) -> Result<EigenPairs<T>> {
    let n = m.dim();
    let mut a = m.matrix().clone();
    let mut v = Matrix::identity(n);
    let norm = a.frobenius_norm();
    let tol = T::of(1e-12).max(T::epsilon() * T::of_usize(n)) * norm;

    let mut sweeps = 0;
    let mut residual = off_diagonal_norm(&a);
    while residual > tol {
        if sweeps == MAX_SWEEPS {
            return Err(Error::NoConvergence {
                sweeps,
                residual: residual.as_f64(),
            });
        }
        for p in 0..n.saturating_sub(1) {
            for q in p + 1..n {
                rotate(&mut a, &mut v, p, q);
            }
        }
        sweeps += 1;
        residual = off_diagonal_norm(&a);
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        a[(j, j)]
            .partial_cmp(&a[(i, i)])
            .unwrap_or(std::cmp::Ordering::Equal)
    });

    let values = order.iter().map(|&k| a[(k, k)]).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let mut lead = 0;
        for i in 1..n {
            if v[(i, src)].abs() > v[(lead, src)].abs() {
                lead = i;
            }
        }
        let sign = if v[(lead, src)] < T::zero() {
            -T::one()
        } else {
            T::one()
        };
        for i in 0..n {
            vectors[(i, dst)] = sign * v[(i, src)];
        }
    }

    Ok(EigenPairs {
        values,
        vectors,
        sweeps,
    })
}

/// One Jacobi rotation annihilating `a[p][q]`.
fn rotate<T: Real>(a: &mut Matrix<T>, v: &mut Matrix<T>, p: usize, q: usize) {
    let apq = a[(p, q)];
    if apq == T::zero() {
        return;
    }
    let n = a.rows();
    let theta = (a[(q, q)] - a[(p, p)]) / (T::of(2.0) * apq);
    let t = if theta.is_infinite() {
        T::zero()
    } else {
        let sign = if theta < T::zero() { -T::one() } else { T::one() };
        sign / (theta.abs() + (theta * theta + T::one()).sqrt())
    };
    let c = T::one() / (t * t + T::one()).sqrt();
    let s = t * c;

    for k in 0..n {
        let akp = a[(k, p)];
        let akq = a[(k, q)];
        a[(k, p)] = c * akp - s * akq;
        a[(k, q)] = s * akp + c * akq;
    }
    for k in 0..n {
        let apk = a[(p, k)];
        let aqk = a[(q, k)];
        a[(p, k)] = c * apk - s * aqk;
        a[(q, k)] = s * apk + c * aqk;
    }
    a[(p, q)] = T::zero();
    a[(q, p)] = T::zero();

    for k in 0..n {
        let vkp = v[(k, p)];
        let vkq = v[(k, q)];
        v[(k, p)] = c * vkp - s * vkq;
        v[(k, q)] = s * vkp + c * vkq;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_symmetric(n: usize, seed: u64) -> SymMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let x: f64 = rng.random_range(-1.0..1.0);
                m[(i, j)] = x;
                m[(j, i)] = x;
            }
        }
        SymMatrix::new(m).unwrap()
    }

    #[test]
    fn identity_spectrum() {
        let eig = sym_eig(&SymMatrix::new(Matrix::<f64>::identity(3)).unwrap()).unwrap();
        assert_eq!(eig.values, vec![1.0, 1.0, 1.0]);
        assert!(eig.vectors.transpose().row_orthonormality_error() < 1e-15);
    }

    #[test]
    fn diagonal_is_sorted_with_axis_vectors() {
        let m = SymMatrix::new(Matrix::from_diag(&[3.0, 1.0, 2.0])).unwrap();
        let eig = sym_eig(&m).unwrap();
        assert_eq!(eig.values, vec![3.0, 2.0, 1.0]);
        assert_eq!(eig.vector(0), vec![1.0, 0.0, 0.0]);
        assert_eq!(eig.vector(1), vec![0.0, 0.0, 1.0]);
        assert_eq!(eig.vector(2), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn random_reconstruction() {
        let m = random_symmetric(8, 11);
        let eig = sym_eig(&m).unwrap();
        let err = eig.reconstruct().sub(m.matrix()).unwrap().frobenius_norm();
        assert!(err <= 1e-8 * m.frobenius_norm(), "reconstruction error {err}");
        assert!(eig.vectors.transpose().row_orthonormality_error() < 1e-10);
        assert!(eig.values.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn sign_convention_largest_entry_positive() {
        let m = random_symmetric(6, 3);
        let eig = sym_eig(&m).unwrap();
        for k in 0..6 {
            let col = eig.vector(k);
            let lead = col
                .iter()
                .enumerate()
                .fold(0, |best, (i, x)| if x.abs() > col[best].abs() { i } else { best });
            assert!(col[lead] > 0.0);
        }
    }

    #[test]
    fn rejects_non_finite_and_asymmetric() {
        let mut m = Matrix::<f64>::identity(2);
        m[(0, 1)] = f64::NAN;
        assert!(matches!(SymMatrix::new(m), Err(Error::InvalidMatrix(_))));
        let mut m = Matrix::<f64>::identity(2);
        m[(0, 1)] = 0.5;
        assert!(matches!(SymMatrix::new(m), Err(Error::InvalidMatrix(_))));
    }

    #[test]
    fn zero_matrix_converges_immediately() {
        let eig = sym_eig(&SymMatrix::<f64>::zeros(4)).unwrap();
        assert_eq!(eig.sweeps, 0);
        assert!(eig.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_precision_decomposes() {
        let m = random_symmetric(5, 9).matrix().cast::<f32>();
        let m = SymMatrix::new(m).unwrap();
        let eig = sym_eig(&m).unwrap();
        let err = eig.reconstruct().sub(m.matrix()).unwrap().frobenius_norm();
        assert!(err <= 1e-5 * m.frobenius_norm());
    }
}
