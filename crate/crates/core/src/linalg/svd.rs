//! One-sided Jacobi SVD for the small square products that principal angles need.

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::{dot, Real};

pub const MAX_SVD_SIZE: usize = 512;
const MAX_SVD_SWEEPS: usize = 100;

/// `m = u · diag(s) · vᵀ` with `s` descending and non-negative.
#[derive(Clone, Debug)]
pub struct Svd<T> {
    pub u: Matrix<T>,
    pub s: Vec<T>,
    pub v: Matrix<T>,
}

impl<T: Real> Svd<T> {
    pub fn reconstruct(&self) -> Matrix<T> {
        let n = self.s.len();
        let mut us = self.u.clone();
        for i in 0..n {
            for j in 0..n {
                us[(i, j)] *= self.s[j];
            }
        }
        us.matmul_t(&self.v).expect("square factors")
    }
}

/// Singular value decomposition of a square matrix (Hestenes rotations on columns).
pub fn svd_small<T: Real>(m: &Matrix<T>) -> Result<Svd<T>> {
    let (rows, cols) = m.shape();
    if rows != cols {
        return Err(Error::DimensionMismatch(format!(
            "svd_small expects a square matrix, got {rows}x{cols}"
        )));
    }
    let n = rows;
    if n > MAX_SVD_SIZE {
        return Err(Error::DimensionMismatch(format!(
            "svd_small supports up to {MAX_SVD_SIZE}, got {n}"
        )));
    }
    if !m.is_finite() {
        return Err(Error::InvalidMatrix("non-finite entry".into()));
    }

    // Work on columns: store the transpose so each column is a contiguous row.
    let mut a = m.transpose();
    let mut v = Matrix::<T>::identity(n);
    let eps = T::epsilon();

    let mut converged = n < 2;
    let mut sweeps = 0;
    while !converged {
        if sweeps == MAX_SVD_SWEEPS {
            return Err(Error::NoConvergence {
                sweeps,
                residual: f64::NAN,
            });
        }
        converged = true;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let alpha = dot(a.row(p), a.row(p));
                let beta = dot(a.row(q), a.row(q));
                let gamma = dot(a.row(p), a.row(q));
                if gamma == T::zero() || gamma.abs() <= eps * (alpha * beta).sqrt() {
                    continue;
                }
                converged = false;
                let zeta = (beta - alpha) / (T::of(2.0) * gamma);
                let sign = if zeta < T::zero() { -T::one() } else { T::one() };
                let t = sign / (zeta.abs() + (T::one() + zeta * zeta).sqrt());
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = c * t;
                rotate_rows(&mut a, p, q, c, s);
                rotate_rows(&mut v, p, q, c, s);
            }
        }
        sweeps += 1;
    }

    // a rows are the columns of m·V; v rows are the columns of V.
    let norms: Vec<T> = a.row_iter().map(|r| dot(r, r).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        norms[j]
            .partial_cmp(&norms[i])
            .unwrap_or(std::cmp::Ordering::Equal)
    });

    let mut u_cols: Vec<Vec<T>> = Vec::with_capacity(n);
    let mut s = Vec::with_capacity(n);
    let mut v_out = Matrix::zeros(n, n);
    let scale = norms.iter().fold(T::zero(), |acc, &x| acc.max(x));
    let tiny = eps * T::of_usize(n) * scale;
    for (dst, &src) in order.iter().enumerate() {
        s.push(norms[src]);
        for i in 0..n {
            v_out[(i, dst)] = v[(src, i)];
        }
        if norms[src] > tiny {
            u_cols.push(a.row(src).iter().map(|&x| x / norms[src]).collect());
        } else {
            u_cols.push(Vec::new());
        }
    }
    complete_orthonormal(&mut u_cols, n);

    let mut u = Matrix::zeros(n, n);
    for (j, col) in u_cols.iter().enumerate() {
        for i in 0..n {
            u[(i, j)] = col[i];
        }
    }
    Ok(Svd { u, s, v: v_out })
}

/// Singular values only, descending.
pub fn singular_values<T: Real>(m: &Matrix<T>) -> Result<Vec<T>> {
    svd_small(m).map(|svd| svd.s)
}

fn rotate_rows<T: Real>(a: &mut Matrix<T>, p: usize, q: usize, c: T, s: T) {
    for k in 0..a.cols() {
        let ap = a[(p, k)];
        let aq = a[(q, k)];
        a[(p, k)] = c * ap - s * aq;
        a[(q, k)] = s * ap + c * aq;
    }
}

/// Fills empty columns with unit vectors orthogonal to the others.
fn complete_orthonormal<T: Real>(cols: &mut [Vec<T>], n: usize) {
    for j in 0..cols.len() {
        if !cols[j].is_empty() {
            continue;
        }
        for axis in 0..n {
            let mut cand = vec![T::zero(); n];
            cand[axis] = T::one();
            for other in cols.iter().filter(|c| !c.is_empty()) {
                let proj = dot(&cand, other);
                for (x, &o) in cand.iter_mut().zip(other) {
                    *x -= proj * o;
                }
            }
            let len = dot(&cand, &cand).sqrt();
            if len > T::of(0.5) {
                cand.iter_mut().for_each(|x| *x /= len);
                cols[j] = cand;
                break;
            }
        }
    }
}
