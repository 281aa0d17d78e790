//! Zero-shot classification against class anchors, projection onto the text
//! subspace, and per-sample geometry diagnostics.

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::{argmax, dot, norm, Real};
use crate::subspace::Subspace;

/// Class-prompt embeddings: C ≥ 2 unit rows.
#[derive(Clone, Debug)]
pub struct TextAnchorSet<T> {
    anchors: Matrix<T>,
    class_names: Vec<String>,
}

impl<T: Real> TextAnchorSet<T> {
    /// Validates unit-norm rows. Names default to `class{c}` when empty.
    pub fn new(anchors: Matrix<T>, class_names: Vec<String>) -> Result<Self> {
        let c = anchors.rows();
        if c < 2 {
            return Err(Error::DegenerateAnchors(format!("need at least 2 anchors, got {c}")));
        }
        let tol = T::of(1e-10).max(T::epsilon() * T::of(64.0));
        for (i, row) in anchors.row_iter().enumerate() {
            let n = norm(row);
            if n == T::zero() {
                return Err(Error::DegenerateAnchors(format!("anchor {i} is the zero vector")));
            }
            if (n - T::one()).abs() > tol {
                return Err(Error::DegenerateAnchors(format!("anchor {i} has norm {n}")));
            }
        }
        let class_names = if class_names.is_empty() {
            (0..c).map(|i| format!("class{i}")).collect()
        } else if class_names.len() == c {
            class_names
        } else {
            return Err(Error::DimensionMismatch(format!(
                "{} class names for {c} anchors",
                class_names.len()
            )));
        };
        Ok(Self { anchors, class_names })
    }

    /// Rescales every row to unit norm first (for anchors read from disk).
    pub fn normalized(mut anchors: Matrix<T>, class_names: Vec<String>) -> Result<Self> {
        for i in 0..anchors.rows() {
            let row = anchors.row_mut(i);
            let n = norm(row);
            if n == T::zero() {
                return Err(Error::DegenerateAnchors(format!("anchor {i} is the zero vector")));
            }
            row.iter_mut().for_each(|x| *x /= n);
        }
        Self::new(anchors, class_names)
    }

    pub fn matrix(&self) -> &Matrix<T> {
        &self.anchors
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    #[inline]
    pub fn num_classes(&self) -> usize {
        self.anchors.rows()
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.anchors.cols()
    }

    pub fn anchor(&self, c: usize) -> &[T] {
        self.anchors.row(c)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction<T> {
    pub class_index: usize,
    /// Cosine similarity to the predicted anchor.
    pub score: T,
    pub probs: Vec<T>,
    /// Set when the input (or its projection) was the zero vector.
    pub no_signal: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleDiagnostics<T> {
    pub angle_to_text_subspace: T,
    pub semantic_concentration: T,
    pub gt_similarity: T,
}

/// `v Bᵀ B`.
pub fn project<T: Real>(v: &[T], bt: &Subspace<T>) -> Vec<T> {
    let coords = bt.basis.mul_vec(v);
    bt.basis.vec_mul(&coords)
}

/// Row-wise projection of a batch.
pub fn project_rows<T: Real>(batch: &Matrix<T>, bt: &Subspace<T>) -> Result<Matrix<T>> {
    batch.matmul_t(&bt.basis)?.matmul(&bt.basis)
}

/// Numerically stable softmax of `scores / temperature`.
pub fn softmax<T: Real>(scores: &[T], temperature: T) -> Vec<T> {
    let top = scores.iter().fold(T::neg_infinity(), |m, &s| m.max(s));
    let mut probs: Vec<T> = scores.iter().map(|&s| ((s - top) / temperature).exp()).collect();
    let total: T = probs.iter().copied().sum();
    probs.iter_mut().for_each(|p| *p /= total);
    probs
}

/// Cosine scores `v̂ᵀ t_c`, or `None` for the zero vector.
pub fn cosine_scores<T: Real>(v: &[T], anchors: &TextAnchorSet<T>) -> Option<Vec<T>> {
    let n = norm(v);
    if n == T::zero() || !n.is_finite() {
        return None;
    }
    Some(anchors.matrix().row_iter().map(|t| dot(v, t) / n).collect())
}

pub fn zero_shot<T: Real>(v: &[T], anchors: &TextAnchorSet<T>, temperature: T) -> Prediction<T> {
    match cosine_scores(v, anchors) {
        Some(scores) => {
            let class_index = argmax(&scores);
            Prediction {
                class_index,
                score: scores[class_index],
                probs: softmax(&scores, temperature),
                no_signal: false,
            }
        }
        None => {
            let c = anchors.num_classes();
            Prediction {
                class_index: 0,
                score: T::zero(),
                probs: vec![T::one() / T::of_usize(c); c],
                no_signal: true,
            }
        }
    }
}

pub fn zero_shot_rows<T: Real>(batch: &Matrix<T>, anchors: &TextAnchorSet<T>, temperature: T) -> Vec<Prediction<T>> {
    batch.row_iter().map(|v| zero_shot(v, anchors, temperature)).collect()
}

pub fn predict_after_projection<T: Real>(
    v: &[T],
    bt: &Subspace<T>,
    anchors: &TextAnchorSet<T>,
    temperature: T,
) -> Prediction<T> {
    zero_shot(&project(v, bt), anchors, temperature)
}

/// Fraction of energy kept by the projection, `‖v Bᵀ‖² / ‖v‖²`.
pub fn semantic_concentration<T: Real>(v: &[T], bt: &Subspace<T>) -> Result<T> {
    let energy = dot(v, v);
    if energy == T::zero() {
        return Err(Error::DegenerateEmbedding(0));
    }
    let coords = bt.basis.mul_vec(v);
    Ok((dot(&coords, &coords) / energy).min(T::one()))
}

pub fn diagnose<T: Real>(
    v: &[T],
    bt: &Subspace<T>,
    anchors: &TextAnchorSet<T>,
    gt: usize,
) -> Result<SampleDiagnostics<T>> {
    if gt >= anchors.num_classes() {
        return Err(Error::DimensionMismatch(format!(
            "label {gt} for {} classes",
            anchors.num_classes()
        )));
    }
    let semantic_concentration = semantic_concentration(v, bt)?;
    let angle = semantic_concentration.sqrt().min(T::one()).acos();
    let gt_similarity = dot(v, anchors.anchor(gt)) / norm(v);
    Ok(SampleDiagnostics {
        angle_to_text_subspace: angle,
        semantic_concentration,
        gt_similarity,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn axes(d: usize, c: usize) -> TextAnchorSet<f64> {
        let mut m = Matrix::zeros(c, d);
        for i in 0..c {
            m[(i, i)] = 1.0;
        }
        TextAnchorSet::new(m, Vec::new()).unwrap()
    }

    fn plane() -> Subspace<f64> {
        Subspace::from_basis(Matrix::from_rows(&[[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]]).unwrap()).unwrap()
    }

    #[test]
    fn projection_hand_cases() {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert_eq!(project(&[h, 0.0, h, 0.0], &plane()), vec![h, 0.0, 0.0, 0.0]);
        assert_eq!(project(&[0.0, 0.0, 1.0, 0.0], &plane()), vec![0.0; 4]);
        assert_eq!(project(&[0.3, 0.4, 0.0, 0.0], &plane()), vec![0.3, 0.4, 0.0, 0.0]);
    }

    #[test]
    fn anchor_hit_is_exact() {
        let anchors = axes(4, 4);
        let p = zero_shot(&[0.0, 0.0, 1.0, 0.0], &anchors, 0.01);
        assert_eq!(p.class_index, 2);
        assert_eq!(p.score, 1.0);
        assert!((p.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ties_go_to_lower_index() {
        let anchors = axes(3, 3);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert_eq!(zero_shot(&[0.0, h, h], &anchors, 0.01).class_index, 1);
    }

    #[test]
    fn mostly_second_axis() {
        let anchors = axes(3, 3);
        assert_eq!(zero_shot(&[0.1, 0.9, 0.0], &anchors, 0.01).class_index, 1);
    }

    #[test]
    fn zero_vector_has_no_signal() {
        let anchors = axes(4, 2);
        let p = predict_after_projection(&[0.0, 0.0, 0.6, 0.8], &plane(), &anchors, 0.01);
        assert!(p.no_signal);
        assert_eq!(p.probs, vec![0.5, 0.5]);
    }

    #[test]
    fn projection_removes_nuisance() {
        // Raw argmax lands on an extra anchor that leaves the text plane.
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let anchors = TextAnchorSet::new(
            Matrix::from_rows(&[[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [h, 0.0, h, 0.0]]).unwrap(),
            Vec::new(),
        )
        .unwrap();
        let v = [0.0, 1.0, 5.0, 0.0];
        assert_eq!(zero_shot(&v, &anchors, 0.01).class_index, 2);
        assert_eq!(predict_after_projection(&v, &plane(), &anchors, 0.01).class_index, 1);
    }

    #[test]
    fn diagnostics_hand_cases() {
        let anchors = axes(4, 2);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let d = diagnose(&[h, 0.0, h, 0.0], &plane(), &anchors, 0).unwrap();
        assert!((d.semantic_concentration - 0.5).abs() < 1e-15);
        assert!((d.angle_to_text_subspace - std::f64::consts::FRAC_PI_4).abs() < 1e-12);
        assert!((d.gt_similarity - h).abs() < 1e-15);
        let d = diagnose(&[0.0, 0.0, 0.0, 1.0], &plane(), &anchors, 1).unwrap();
        assert_eq!(d.semantic_concentration, 0.0);
        assert_eq!(d.angle_to_text_subspace, std::f64::consts::FRAC_PI_2);
        assert!(matches!(diagnose(&[0.0; 4], &plane(), &anchors, 0), Err(Error::DegenerateEmbedding(_))));
    }

    #[test]
    fn anchors_must_be_unit() {
        let m = Matrix::from_rows(&[[2.0, 0.0], [0.0, 1.0]]).unwrap();
        assert!(TextAnchorSet::new(m.clone(), Vec::new()).is_err());
        assert!(TextAnchorSet::normalized(m, Vec::new()).is_ok());
        let single = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
        assert!(TextAnchorSet::new(single, Vec::new()).is_err());
    }
}
