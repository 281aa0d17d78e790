//! A minimal adaptable image-encoder tail: frozen linear map, layer
//! normalization with a trainable affine, and L2 normalization.

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::{dot, Real};

/// Rows whose pre-normalization norm falls below this are degenerate.
pub const MIN_ROW_NORM: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct ToyEncoder<T> {
    /// m×d input map; `None` is the identity (m = d).
    w: Option<Matrix<T>>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub eps_norm: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamGradient<T> {
    pub d_gamma: Vec<T>,
    pub d_beta: Vec<T>,
}

impl<T: Real> ParamGradient<T> {
    pub fn zeros(d: usize) -> Self {
        Self {
            d_gamma: vec![T::zero(); d],
            d_beta: vec![T::zero(); d],
        }
    }

    /// `[d_gamma, d_beta]` as one vector, the layout the optimizer uses.
    pub fn flatten(&self) -> Vec<T> {
        self.d_gamma.iter().chain(&self.d_beta).copied().collect()
    }

    pub fn is_finite(&self) -> bool {
        self.d_gamma.iter().chain(&self.d_beta).all(|x| x.is_finite())
    }
}

/// Forward output with the rows that had to be substituted.
#[derive(Clone, Debug)]
pub struct Encoded<T> {
    pub embeddings: Matrix<T>,
    pub degenerate_rows: Vec<usize>,
}

struct RowState<T> {
    y: Vec<T>,
    a_norm: T,
    v: Vec<T>,
}

impl<T: Real> ToyEncoder<T> {
    /// Identity input map on `d` features.
    pub fn new(d: usize) -> Self {
        Self {
            w: None,
            gamma: vec![T::one(); d],
            beta: vec![T::zero(); d],
            eps_norm: T::of(1e-5),
        }
    }

    pub fn with_projection(w: Matrix<T>) -> Self {
        let mut enc = Self::new(w.cols());
        enc.w = Some(w);
        enc
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.gamma.len()
    }

    pub fn input_dim(&self) -> usize {
        self.w.as_ref().map_or(self.dim(), |w| w.rows())
    }

    pub fn projection(&self) -> Option<&Matrix<T>> {
        self.w.as_ref()
    }

    pub fn reset(&mut self) {
        self.gamma.iter_mut().for_each(|g| *g = T::one());
        self.beta.iter_mut().for_each(|b| *b = T::zero());
    }

    pub fn apply_update(&mut self, delta_gamma: &[T], delta_beta: &[T]) {
        for (g, &d) in self.gamma.iter_mut().zip(delta_gamma) {
            *g += d;
        }
        for (b, &d) in self.beta.iter_mut().zip(delta_beta) {
            *b += d;
        }
    }

    /// Applies a flat `[gamma, beta]` delta.
    pub fn apply_flat(&mut self, delta: &[T]) {
        let d = self.dim();
        self.apply_update(&delta[..d], &delta[d..2 * d]);
    }

    fn check_input(&self, x: &Matrix<T>) -> Result<()> {
        if x.cols() != self.input_dim() {
            return Err(Error::DimensionMismatch(format!(
                "input dim {} vs encoder input dim {}",
                x.cols(),
                self.input_dim()
            )));
        }
        if !x.is_finite() {
            return Err(Error::InvalidMatrix("non-finite encoder input".into()));
        }
        Ok(())
    }

    fn row_state(&self, z: &[T]) -> Option<RowState<T>> {
        let d = T::of_usize(z.len());
        let mean = z.iter().copied().sum::<T>() / d;
        let var = z.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / d;
        let inv = T::one() / (var + self.eps_norm).sqrt();
        let y: Vec<T> = z.iter().map(|&x| (x - mean) * inv).collect();
        let a: Vec<T> = y
            .iter()
            .zip(self.gamma.iter().zip(&self.beta))
            .map(|(&y, (&g, &b))| g * y + b)
            .collect();
        let a_norm = dot(&a, &a).sqrt();
        if !(a_norm >= T::of(MIN_ROW_NORM)) {
            return None;
        }
        let v = a.iter().map(|&x| x / a_norm).collect();
        Some(RowState { y, a_norm, v })
    }

    fn mapped(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        match &self.w {
            Some(w) => x.matmul(w),
            None => Ok(x.clone()),
        }
    }

    /// Unit-norm embeddings for each input row.
    ///
    /// A degenerate row is replaced by the previous valid row (or the first
    /// valid row when it leads the batch); it is an error only when no row is valid.
    pub fn forward(&self, x: &Matrix<T>) -> Result<Encoded<T>> {
        self.check_input(x)?;
        let z = self.mapped(x)?;
        let d = self.dim();
        let mut out = Matrix::zeros(z.rows(), d);
        let mut degenerate_rows = Vec::new();
        let mut last_valid: Option<usize> = None;
        for i in 0..z.rows() {
            match self.row_state(z.row(i)) {
                Some(state) => {
                    out.row_mut(i).copy_from_slice(&state.v);
                    if last_valid.is_none() {
                        for &j in &degenerate_rows {
                            out.row_mut(j).copy_from_slice(&state.v);
                        }
                    }
                    last_valid = Some(i);
                }
                None => {
                    degenerate_rows.push(i);
                    if let Some(j) = last_valid {
                        let prev = out.row(j).to_vec();
                        out.row_mut(i).copy_from_slice(&prev);
                    }
                }
            }
        }
        if last_valid.is_none() && z.rows() > 0 {
            return Err(Error::DegenerateEmbedding(0));
        }
        if !degenerate_rows.is_empty() {
            log::warn!("{} degenerate embedding rows substituted", degenerate_rows.len());
        }
        Ok(Encoded {
            embeddings: out,
            degenerate_rows,
        })
    }

    /// Gradient of `Σ upstream ⊙ forward(x)` with respect to gamma and beta.
    ///
    /// Degenerate rows contribute nothing.
    pub fn backward(&self, x: &Matrix<T>, upstream: &Matrix<T>) -> Result<ParamGradient<T>> {
        self.check_input(x)?;
        let d = self.dim();
        if upstream.shape() != (x.rows(), d) {
            return Err(Error::DimensionMismatch(format!(
                "upstream {:?} for a batch of {} rows and dim {d}",
                upstream.shape(),
                x.rows()
            )));
        }
        let z = self.mapped(x)?;
        let mut grad = ParamGradient::zeros(d);
        for i in 0..z.rows() {
            let Some(state) = self.row_state(z.row(i)) else {
                continue;
            };
            let g_v = upstream.row(i);
            let along = dot(&state.v, g_v);
            for k in 0..d {
                let g_a = (g_v[k] - state.v[k] * along) / state.a_norm;
                grad.d_gamma[k] += g_a * state.y[k];
                grad.d_beta[k] += g_a;
            }
        }
        Ok(grad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn standardized_rows_are_only_normalized() {
        let x = Matrix::from_rows(&[[1.0f64, -1.0, 1.0, -1.0]]).unwrap();
        let enc = ToyEncoder::new(4);
        let out = enc.forward(&x).unwrap().embeddings;
        for k in 0..4 {
            assert!((out[(0, k)] - x[(0, k)] / 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_shift_of_beta() {
        let x = random(1, 6, 1);
        let mut enc = ToyEncoder::new(6);
        let base = enc.forward(&x).unwrap().embeddings;
        enc.apply_update(&[0.0; 6], &[0.3; 6]);
        let shifted = enc.forward(&x).unwrap().embeddings;
        // normalize(y + c) where y = base row scaled back by its norm.
        let eps = 1e-5;
        let row = x.row(0);
        let mean = row.iter().sum::<f64>() / 6.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0;
        let y: Vec<f64> = row.iter().map(|v| (v - mean) / (var + eps).sqrt() + 0.3).collect();
        let n = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        for k in 0..6 {
            assert!((shifted[(0, k)] - y[k] / n).abs() < 1e-12);
        }
        assert_ne!(base, shifted);
    }

    #[test]
    fn outputs_are_unit_rows() {
        let x = random(4, 8, 2);
        let out = ToyEncoder::new(8).forward(&x).unwrap().embeddings;
        for row in out.row_iter() {
            assert!((dot(row, row).sqrt() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let x = random(4, 8, 3);
        let g = ToyEncoder::new(8).backward(&x, &Matrix::zeros(4, 8)).unwrap();
        assert_eq!(g, ParamGradient::zeros(8));
    }

    #[test]
    fn upstream_along_output_is_annihilated() {
        let x = random(3, 5, 4);
        let enc = ToyEncoder::new(5);
        let v = enc.forward(&x).unwrap().embeddings;
        let g = enc.backward(&x, &v.scaled(2.5)).unwrap();
        assert!(g.flatten().iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn degenerate_row_copies_previous() {
        let x = Matrix::from_rows(&[[1.0, 2.0, 3.0], [5.0, 5.0, 5.0], [3.0, 1.0, 2.0]]).unwrap();
        let out = ToyEncoder::new(3).forward(&x).unwrap();
        assert_eq!(out.degenerate_rows, vec![1]);
        assert_eq!(out.embeddings.row(1), out.embeddings.row(0));
    }

    #[test]
    fn leading_degenerate_row_uses_first_valid() {
        let x = Matrix::from_rows(&[[5.0, 5.0, 5.0], [3.0, 1.0, 2.0]]).unwrap();
        let out = ToyEncoder::new(3).forward(&x).unwrap();
        assert_eq!(out.embeddings.row(0), out.embeddings.row(1));
        let all_flat = Matrix::from_rows(&[[1.0, 1.0]]).unwrap();
        assert!(ToyEncoder::new(2).forward(&all_flat).is_err());
    }

    #[test]
    fn reset_restores_initial_parameters() {
        let mut enc = ToyEncoder::<f64>::new(3);
        enc.apply_update(&[0.1, 0.2, 0.3], &[1.0, 1.0, 1.0]);
        assert_eq!(enc.beta, vec![1.0; 3]);
        enc.reset();
        assert_eq!(enc, ToyEncoder::new(3));
    }

    #[test]
    fn projection_changes_input_width() {
        let w = random(6, 4, 5);
        let enc = ToyEncoder::with_projection(w);
        assert_eq!(enc.input_dim(), 6);
        assert_eq!(enc.forward(&random(2, 6, 6)).unwrap().embeddings.shape(), (2, 4));
        assert!(enc.forward(&random(2, 4, 6)).is_err());
    }
}
