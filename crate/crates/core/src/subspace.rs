//! Modality covariances, rank-r principal subspaces, and the chordal alignment
//! loss with its gradient back to the current embedding batch.
//!
//! The gradient goes through the spectral projector `P_V = B_Vᵀ B_V` of the
//! post-update covariance. With eigenpairs `(λ_k, u_k)` and `A = B_Tᵀ B_T`,
//!
//! ```text
//! ∂L/∂Σ_V = Σ_{i<r≤j} −2 (u_iᵀ A u_j) / (λ_i − λ_j) · ½ (u_i u_jᵀ + u_j u_iᵀ)
//! ```
//!
//! and only the `α VᵀV` term of the moving average depends on the batch, so
//! `∂L/∂V = 2α V ∂L/∂Σ_V`.

use crate::error::{Error, Result};
use crate::linalg::{principal_angles, sym_eig, EigenPairs, Matrix, PrincipalAngles, SymMatrix};
use crate::scalar::Real;

/// Eigenvalue differences below this are treated as degenerate.
pub const EPS_GAP: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CovarianceInit {
    TextPrior,
    Zero,
}

/// Exponential moving average of the visual second-moment matrix.
#[derive(Clone, Debug)]
pub struct CovarianceTracker<T> {
    pub sigma: SymMatrix<T>,
    pub alpha: T,
    pub initialized_from: CovarianceInit,
}

impl<T: Real> CovarianceTracker<T> {
    pub fn from_text_prior(sigma_t: &SymMatrix<T>, alpha: T) -> Result<Self> {
        check_alpha(alpha)?;
        Ok(Self {
            sigma: sigma_t.clone(),
            alpha,
            initialized_from: CovarianceInit::TextPrior,
        })
    }

    pub fn zero(dim: usize, alpha: T) -> Result<Self> {
        check_alpha(alpha)?;
        Ok(Self {
            sigma: SymMatrix::zeros(dim),
            alpha,
            initialized_from: CovarianceInit::Zero,
        })
    }

    pub fn dim(&self) -> usize {
        self.sigma.dim()
    }

    /// `Σ ← (1−α) Σ + α VᵀV`, followed by exact symmetrization.
    pub fn ema_update(&self, batch: &Matrix<T>) -> Result<Self> {
        Ok(Self {
            sigma: ema_blend(&self.sigma, batch, self.alpha)?,
            alpha: self.alpha,
            initialized_from: self.initialized_from,
        })
    }
}

fn check_alpha<T: Real>(alpha: T) -> Result<()> {
    if !(alpha >= T::zero() && alpha <= T::one()) {
        return Err(Error::Config(format!("momentum {alpha} outside [0, 1]")));
    }
    Ok(())
}

/// The moving-average step as a free function.
pub fn ema_blend<T: Real>(sigma: &SymMatrix<T>, batch: &Matrix<T>, alpha: T) -> Result<SymMatrix<T>> {
    if batch.cols() != sigma.dim() {
        return Err(Error::DimensionMismatch(format!(
            "batch dim {} vs covariance dim {}",
            batch.cols(),
            sigma.dim()
        )));
    }
    let blended = sigma
        .scaled(T::one() - alpha)
        .add_scaled(&batch.gram(), alpha)?;
    SymMatrix::symmetrized(blended)
}

/// `Σ_T = Tᵀ T` for a C×d anchor matrix.
pub fn text_covariance<T: Real>(anchors: &Matrix<T>) -> Result<SymMatrix<T>> {
    for (c, row) in anchors.row_iter().enumerate() {
        if row.iter().all(|&x| x == T::zero()) {
            return Err(Error::DegenerateAnchors(format!("anchor {c} is the zero vector")));
        }
    }
    if anchors.rows() == 0 {
        return Err(Error::DegenerateAnchors("no anchors".into()));
    }
    SymMatrix::new(anchors.gram())
}

/// An r×d orthonormal basis together with its leading eigenvalues.
#[derive(Clone, Debug)]
pub struct Subspace<T> {
    pub basis: Matrix<T>,
    pub eigenvalues: Vec<T>,
    /// `λ_r − λ_{r+1}`; `None` when r equals the ambient dimension.
    pub eigengap: Option<T>,
}

impl<T: Real> Subspace<T> {
    /// Wraps an orthonormal basis (rows orthonormal within 1e-10·d).
    pub fn from_basis(basis: Matrix<T>) -> Result<Self> {
        let tol = T::of(1e-10).max(T::epsilon() * T::of(64.0)) * T::of_usize(basis.cols().max(1));
        let err = basis.row_orthonormality_error();
        if !(err <= tol) {
            return Err(Error::InvalidMatrix(format!(
                "basis rows not orthonormal (deviation {err})"
            )));
        }
        let r = basis.rows();
        Ok(Self {
            basis,
            eigenvalues: vec![T::one(); r],
            eigengap: None,
        })
    }

    #[inline]
    pub fn rank(&self) -> usize {
        self.basis.rows()
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.basis.cols()
    }

    /// True when the spectrum does not separate the top-r block from the rest.
    pub fn is_gap_degenerate(&self) -> bool {
        self.eigengap.is_some_and(|g| g < T::of(EPS_GAP))
    }

    /// `Bᵀ B`, the orthogonal projector onto the span.
    pub fn projector(&self) -> Matrix<T> {
        self.basis.gram()
    }

    /// Basis `Q · B` for an r×r matrix `Q`.
    pub fn rotated(&self, q: &Matrix<T>) -> Result<Self> {
        Ok(Self {
            basis: q.matmul(&self.basis)?,
            eigenvalues: self.eigenvalues.clone(),
            eigengap: self.eigengap,
        })
    }
}

/// Leading `r` eigenpairs of an already decomposed covariance.
pub fn subspace_from_eig<T: Real>(eig: &EigenPairs<T>, r: usize) -> Result<Subspace<T>> {
    let d = eig.dim();
    if r == 0 {
        return Err(Error::Config("rank must be at least 1".into()));
    }
    if r > d {
        return Err(Error::RankTooLarge { rank: r, dim: d });
    }
    let eigengap = (r < d).then(|| eig.values[r - 1] - eig.values[r]);
    Ok(Subspace {
        basis: eig.top_rows(r),
        eigenvalues: eig.values[..r].to_vec(),
        eigengap,
    })
}

/// Rank-r principal subspace of a symmetric matrix.
pub fn extract_subspace<T: Real>(sigma: &SymMatrix<T>, r: usize) -> Result<Subspace<T>> {
    if r > sigma.dim() {
        return Err(Error::RankTooLarge {
            rank: r,
            dim: sigma.dim(),
        });
    }
    let sub = subspace_from_eig(&sym_eig(sigma)?, r)?;
    if sub.is_gap_degenerate() {
        log::warn!(
            "rank-{r} eigengap {} below {EPS_GAP:e}; subspace is not uniquely defined",
            sub.eigengap.unwrap_or_else(T::zero)
        );
    }
    Ok(sub)
}

fn check_pair<T: Real>(a: &Subspace<T>, b: &Subspace<T>) -> Result<()> {
    if a.rank() != b.rank() || a.dim() != b.dim() {
        return Err(Error::DimensionMismatch(format!(
            "subspaces of rank {} in R^{} and rank {} in R^{}",
            a.rank(),
            a.dim(),
            b.rank(),
            b.dim()
        )));
    }
    Ok(())
}

/// Squared chordal distance `r − ‖B_T B_Vᵀ‖_F²`.
pub fn chordal_loss<T: Real>(bt: &Subspace<T>, bv: &Subspace<T>) -> Result<T> {
    check_pair(bt, bv)?;
    let overlap = bt.basis.matmul_t(&bv.basis)?.frobenius_norm();
    let loss = T::of_usize(bt.rank()) - overlap * overlap;
    Ok(loss.max(T::zero()))
}

pub fn subspace_angles<T: Real>(a: &Subspace<T>, b: &Subspace<T>) -> Result<PrincipalAngles<T>> {
    check_pair(a, b)?;
    principal_angles(&a.basis, &b.basis)
}

/// Gradient of `−tr(A P_r)` with respect to the decomposed matrix, where `P_r`
/// projects onto the leading `r` eigenvectors and `A` is symmetric.
///
/// Returns the d×d gradient and the number of eigenpair terms dropped because
/// their eigenvalue gap fell below [`EPS_GAP`].
pub fn projector_gradient<T: Real>(a: &Matrix<T>, eig: &EigenPairs<T>, r: usize) -> Result<(Matrix<T>, usize)> {
    let d = eig.dim();
    if a.shape() != (d, d) {
        return Err(Error::DimensionMismatch(format!(
            "weight {:?} vs spectrum of size {d}",
            a.shape()
        )));
    }
    if r == 0 || r > d {
        return Err(Error::RankTooLarge { rank: r, dim: d });
    }
    let u = &eig.vectors;
    // M = Uᵀ A U restricted to the (top, rest) block.
    let au = a.matmul(u)?;
    let mut k = Matrix::zeros(d, d);
    let mut dropped = 0;
    let gap_floor = T::of(EPS_GAP);
    for i in 0..r {
        for j in r..d {
            let gap = eig.values[i] - eig.values[j];
            if gap.abs() < gap_floor {
                dropped += 1;
                continue;
            }
            let mut m_ij = T::zero();
            for row in 0..d {
                m_ij += u[(row, i)] * au[(row, j)];
            }
            // −2 m / gap, split evenly between the (i, j) and (j, i) entries.
            let coef = -m_ij / gap;
            k[(i, j)] = coef;
            k[(j, i)] = coef;
        }
    }
    let grad = u.matmul(&k)?.matmul_t(u)?;
    Ok((grad, dropped))
}

/// Loss value and gradient with respect to the rows of the current batch.
#[derive(Clone, Debug)]
pub struct AlignmentGradient<T> {
    pub d_loss_d_batch: Matrix<T>,
    pub loss_value: T,
    pub dropped_terms: usize,
}

/// Gradient of the chordal alignment loss through the moving average and the
/// rank-r eigenbasis back to the batch rows.
///
/// `eig_v` must be the full spectrum of the covariance after the moving-average
/// step that consumed `batch`.
pub fn chordal_loss_grad<T: Real>(
    bt: &Subspace<T>,
    eig_v: &EigenPairs<T>,
    batch: &Matrix<T>,
    alpha: T,
    r: usize,
) -> Result<AlignmentGradient<T>> {
    if bt.rank() != r {
        return Err(Error::DimensionMismatch(format!(
            "text basis rank {} vs requested rank {r}",
            bt.rank()
        )));
    }
    if batch.cols() != eig_v.dim() || bt.dim() != eig_v.dim() {
        return Err(Error::DimensionMismatch(format!(
            "batch dim {}, text dim {}, spectrum dim {}",
            batch.cols(),
            bt.dim(),
            eig_v.dim()
        )));
    }
    let bv = subspace_from_eig(eig_v, r)?;
    let loss_value = chordal_loss(bt, &bv)?;
    let (d_sigma, dropped_terms) = projector_gradient(&bt.projector(), eig_v, r)?;
    let d_loss_d_batch = batch.matmul(&d_sigma)?.scaled(T::of(2.0) * alpha);
    if !loss_value.is_finite() || !d_loss_d_batch.is_finite() {
        return Err(Error::NumericalBlowup("alignment gradient"));
    }
    Ok(AlignmentGradient {
        d_loss_d_batch,
        loss_value,
        dropped_terms,
    })
}

/// `|L(B_T, Q·B_V) − L(B_T, B_V)|` for an orthogonal `Q`.
pub fn basis_invariance_check<T: Real>(bt: &Subspace<T>, bv: &Subspace<T>, q: &Matrix<T>) -> Result<T> {
    let r = bv.rank();
    if q.shape() != (r, r) {
        return Err(Error::DimensionMismatch(format!(
            "rotation {:?} for rank {r}",
            q.shape()
        )));
    }
    let qtq = q.transpose().matmul(q)?;
    let deviation = qtq.max_abs_diff(&Matrix::identity(r));
    if !(deviation <= T::of(1e-10).max(T::epsilon() * T::of(64.0))) {
        return Err(Error::InvalidRotation(deviation.as_f64()));
    }
    let base = chordal_loss(bt, bv)?;
    let rotated = chordal_loss(bt, &bv.rotated(q)?)?;
    Ok((rotated - base).abs())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn diag(values: &[f64]) -> SymMatrix<f64> {
        SymMatrix::new(Matrix::from_diag(values)).unwrap()
    }

    #[test]
    fn single_anchor_covariance() {
        let t = Matrix::from_rows(&[[1.0, 0.0, 0.0]]).unwrap();
        assert_eq!(text_covariance(&t).unwrap().matrix(), &Matrix::from_diag(&[1.0, 0.0, 0.0]));
        let t = Matrix::from_rows(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]).unwrap();
        assert_eq!(text_covariance(&t).unwrap().matrix(), &Matrix::from_diag(&[1.0, 1.0, 0.0]));
    }

    #[test]
    fn zero_anchor_rejected() {
        let t = Matrix::from_rows(&[[1.0, 0.0], [0.0, 0.0]]).unwrap();
        assert!(matches!(text_covariance(&t), Err(Error::DegenerateAnchors(_))));
    }

    #[test]
    fn ema_extremes() {
        let prior = diag(&[1.0, 0.0]);
        let batch = Matrix::from_rows(&[[0.6, 0.8]]).unwrap();
        let full = CovarianceTracker::from_text_prior(&prior, 1.0).unwrap().ema_update(&batch).unwrap();
        assert_eq!(full.sigma.matrix(), &batch.gram());
        let frozen = CovarianceTracker::from_text_prior(&prior, 0.0).unwrap().ema_update(&batch).unwrap();
        assert_eq!(frozen.sigma.matrix(), prior.matrix());
    }

    #[test]
    fn ema_dimension_mismatch() {
        let tracker = CovarianceTracker::<f64>::zero(3, 0.5).unwrap();
        let batch = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
        assert!(matches!(tracker.ema_update(&batch), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn alpha_out_of_range() {
        assert!(CovarianceTracker::<f64>::zero(2, 1.5).is_err());
    }

    #[test]
    fn extract_top_two_of_diagonal() {
        let sub = extract_subspace(&diag(&[3.0, 2.0, 1.0]), 2).unwrap();
        assert_eq!(sub.eigenvalues, vec![3.0, 2.0]);
        assert_eq!(sub.basis, Matrix::from_rows(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]).unwrap());
        assert!(!sub.is_gap_degenerate());
    }

    #[test]
    fn identity_spectrum_flags_degenerate_gap() {
        let sub = extract_subspace(&SymMatrix::new(Matrix::<f64>::identity(4)).unwrap(), 2).unwrap();
        assert!(sub.is_gap_degenerate());
    }

    #[test]
    fn rank_too_large() {
        assert!(matches!(
            extract_subspace(&diag(&[1.0, 2.0]), 3),
            Err(Error::RankTooLarge { rank: 3, dim: 2 })
        ));
    }

    #[test]
    fn chordal_loss_extremes() {
        let a = Subspace::from_basis(Matrix::from_rows(&[[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]]).unwrap()).unwrap();
        let b = Subspace::from_basis(Matrix::from_rows(&[[0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0]]).unwrap()).unwrap();
        assert_eq!(chordal_loss(&a, &a).unwrap(), 0.0);
        assert_eq!(chordal_loss(&a, &b).unwrap(), 2.0);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let c = Subspace::from_basis(Matrix::from_rows(&[[1.0, 0.0, 0.0, 0.0], [0.0, h, h, 0.0]]).unwrap()).unwrap();
        assert!((chordal_loss(&a, &c).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn chordal_rank_mismatch() {
        let a = Subspace::from_basis(Matrix::from_rows(&[[1.0, 0.0]]).unwrap()).unwrap();
        let b = Subspace::from_basis(Matrix::<f64>::identity(2)).unwrap();
        assert!(matches!(chordal_loss(&a, &b), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn projector_gradient_hand_case() {
        // Σ = diag(2, 1, 0.5), r = 1 and the symmetric weight e1e2ᵀ + e2e1ᵀ give
        // u1ᵀAu2 = 1, so the (1,2) entries are −2·1/(2−1)·½ = −1.
        let eig = sym_eig(&diag(&[2.0, 1.0, 0.5])).unwrap();
        let mut a = Matrix::zeros(3, 3);
        a[(0, 1)] = 1.0;
        a[(1, 0)] = 1.0;
        let (g, dropped) = projector_gradient(&a, &eig, 1).unwrap();
        assert_eq!(dropped, 0);
        let mut expected = Matrix::zeros(3, 3);
        expected[(0, 1)] = -1.0;
        expected[(1, 0)] = -1.0;
        assert!(g.max_abs_diff(&expected) < 1e-15);
    }

    #[test]
    fn projector_gradient_for_tilted_text_basis() {
        // B_T = (e1 + e2)/√2 gives A = ½(e1+e2)(e1+e2)ᵀ and u1ᵀAu2 = ½.
        let eig = sym_eig(&diag(&[2.0, 1.0, 0.5])).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let bt = Subspace::from_basis(Matrix::from_rows(&[[h, h, 0.0]]).unwrap()).unwrap();
        let (g, _) = projector_gradient(&bt.projector(), &eig, 1).unwrap();
        assert!((g[(0, 1)] + 0.5).abs() < 1e-15);
        assert!((g[(1, 0)] + 0.5).abs() < 1e-15);
        assert!(g[(0, 2)].abs() < 1e-15 && g[(2, 2)].abs() < 1e-15);
    }

    #[test]
    fn degenerate_pairs_are_dropped() {
        let eig = sym_eig(&diag(&[1.0, 1.0, 0.0])).unwrap();
        let a = Matrix::<f64>::identity(3);
        let (_, dropped) = projector_gradient(&a, &eig, 1).unwrap();
        assert_eq!(dropped, 1);
    }

    #[test]
    fn gradient_vanishes_at_alignment() {
        let sigma = diag(&[3.0, 2.0, 1.0, 0.5]);
        let eig = sym_eig(&sigma).unwrap();
        let bv = subspace_from_eig(&eig, 2).unwrap();
        let batch = Matrix::from_rows(&[[0.5, 0.5, 0.5, 0.5], [1.0, 0.0, 0.0, 0.0]]).unwrap();
        let grad = chordal_loss_grad(&bv, &eig, &batch, 0.5, 2).unwrap();
        assert_eq!(grad.loss_value, 0.0);
        assert!(grad.d_loss_d_batch.frobenius_norm() <= 1e-8);
    }

    #[test]
    fn invariance_identity_rotation_is_exact() {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let a = Subspace::from_basis(Matrix::from_rows(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]).unwrap()).unwrap();
        let b = Subspace::from_basis(Matrix::from_rows(&[[h, 0.0, h], [0.0, 1.0, 0.0]]).unwrap()).unwrap();
        assert_eq!(basis_invariance_check(&a, &b, &Matrix::identity(2)).unwrap(), 0.0);
    }

    #[test]
    fn invariance_rejects_non_orthogonal() {
        let a = Subspace::from_basis(Matrix::<f64>::identity(2)).unwrap();
        let q = Matrix::from_rows(&[[1.0, 0.1], [0.0, 1.0]]).unwrap();
        assert!(matches!(basis_invariance_check(&a, &a, &q), Err(Error::InvalidRotation(_))));
    }
}
