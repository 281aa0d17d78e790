//! Test-time objectives on class probabilities and on embeddings.

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Real;

/// Mean prediction entropy and its gradient with respect to the pre-softmax logits.
///
/// With `H = −Σ p log p` per row, `∂H/∂l_k = −p_k (log p_k + H)`; the batch mean
/// divides by the row count.
pub fn entropy_objective<T: Real>(probs: &Matrix<T>) -> (T, Matrix<T>) {
    let (b, c) = probs.shape();
    let mut grad = Matrix::zeros(b, c);
    if b == 0 {
        return (T::zero(), grad);
    }
    let scale = T::one() / T::of_usize(b);
    let mut total = T::zero();
    for i in 0..b {
        let row = probs.row(i);
        let h: T = -row.iter().map(|&p| plogp(p)).sum::<T>();
        total += h;
        for k in 0..c {
            let p = row[k];
            let log_p = if p > T::zero() { p.ln() } else { T::zero() };
            grad[(i, k)] = -p * (log_p + h) * scale;
        }
    }
    (total * scale, grad)
}

#[inline]
fn plogp<T: Real>(p: T) -> T {
    if p > T::zero() {
        p * p.ln()
    } else {
        T::zero()
    }
}

#[derive(Clone, Debug)]
pub struct IcvOutput<T> {
    pub loss: T,
    pub grad: Matrix<T>,
    /// Every sample carried the same pseudo-label.
    pub single_cluster: bool,
}

/// Between-cluster scatter surrogate for the inter-class variance loss:
/// `−(1/B) Σ_c n_c ‖μ_c − μ‖²`, with gradient `−(2/B)(μ_{c_i} − μ)` per row.
pub fn icv_objective<T: Real>(embeddings: &Matrix<T>, pseudo_labels: &[usize], num_classes: usize) -> Result<IcvOutput<T>> {
    let (b, d) = embeddings.shape();
    if pseudo_labels.len() != b {
        return Err(Error::DimensionMismatch(format!(
            "{} pseudo-labels for {b} embeddings",
            pseudo_labels.len()
        )));
    }
    if let Some(&bad) = pseudo_labels.iter().find(|&&c| c >= num_classes) {
        return Err(Error::DimensionMismatch(format!(
            "pseudo-label {bad} for {num_classes} classes"
        )));
    }
    let mut counts = vec![0usize; num_classes];
    let mut sums = Matrix::<T>::zeros(num_classes, d);
    let mut mean = vec![T::zero(); d];
    for (row, &c) in embeddings.row_iter().zip(pseudo_labels) {
        counts[c] += 1;
        for (k, &x) in row.iter().enumerate() {
            sums[(c, k)] += x;
            mean[k] += x;
        }
    }
    let single_cluster = counts.iter().filter(|&&n| n > 0).count() <= 1;
    if b == 0 || single_cluster {
        return Ok(IcvOutput {
            loss: T::zero(),
            grad: Matrix::zeros(b, d),
            single_cluster,
        });
    }
    let inv_b = T::one() / T::of_usize(b);
    mean.iter_mut().for_each(|m| *m *= inv_b);

    // Centered class means μ_c − μ.
    let mut centered = Matrix::zeros(num_classes, d);
    let mut loss = T::zero();
    for c in 0..num_classes {
        if counts[c] == 0 {
            continue;
        }
        let n_c = T::of_usize(counts[c]);
        let mut sq = T::zero();
        for k in 0..d {
            let diff = sums[(c, k)] / n_c - mean[k];
            centered[(c, k)] = diff;
            sq += diff * diff;
        }
        loss -= n_c * sq;
    }
    loss *= inv_b;

    let mut grad = Matrix::zeros(b, d);
    let factor = -T::of(2.0) * inv_b;
    for (i, &c) in pseudo_labels.iter().enumerate() {
        for k in 0..d {
            grad[(i, k)] = factor * centered[(c, k)];
        }
    }
    Ok(IcvOutput {
        loss,
        grad,
        single_cluster: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_hot_rows_have_zero_entropy() {
        let probs = Matrix::from_rows(&[[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]).unwrap();
        let (loss, grad) = entropy_objective(&probs);
        assert_eq!(loss, 0.0);
        assert!(grad.as_slice().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn uniform_rows_have_log_c_entropy() {
        let probs = Matrix::from_vec(2, 10, vec![0.1; 20]).unwrap();
        let (loss, grad) = entropy_objective(&probs);
        assert!((loss - 10f64.ln()).abs() < 1e-12);
        assert!(grad.as_slice().iter().all(|g| g.abs() < 1e-15));
    }

    #[test]
    fn identical_embeddings_have_zero_icv() {
        let e = Matrix::from_rows(&[[1.0, 0.0], [1.0, 0.0], [1.0, 0.0]]).unwrap();
        let out = icv_objective(&e, &[0, 1, 0], 2).unwrap();
        assert_eq!(out.loss, 0.0);
    }

    #[test]
    fn balanced_antipodal_clusters() {
        let e = Matrix::from_rows(&[[1.0, 0.0], [-1.0, 0.0], [1.0, 0.0], [-1.0, 0.0]]).unwrap();
        let out = icv_objective(&e, &[0, 1, 0, 1], 2).unwrap();
        assert_eq!(out.loss, -1.0);
        assert!(!out.single_cluster);
    }

    #[test]
    fn single_cluster_is_flagged() {
        let e = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let out = icv_objective(&e, &[1, 1], 3).unwrap();
        assert!(out.single_cluster);
        assert_eq!(out.loss, 0.0);
        assert!(out.grad.as_slice().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn label_out_of_range() {
        let e = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
        assert!(icv_objective(&e, &[4], 3).is_err());
    }
}
