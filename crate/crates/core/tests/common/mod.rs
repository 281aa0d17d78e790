#![allow(dead_code)]

use rand_chacha::ChaCha8Rng;
use subtta::checks::gaussian;
use subtta::linalg::{sym_eig, Matrix, SymMatrix};
use subtta::subspace::Subspace;

/// Uniformly random r-dimensional subspace of R^d.
pub fn random_subspace(d: usize, r: usize, rng: &mut ChaCha8Rng) -> Subspace<f64> {
    let g = gaussian(d, d, rng);
    let sym = SymMatrix::symmetrized(g.add_scaled(&g.transpose(), 1.0).unwrap()).unwrap();
    Subspace::from_basis(sym_eig(&sym).unwrap().top_rows(r)).unwrap()
}

/// Random r×r orthogonal matrix.
pub fn random_orthogonal(r: usize, rng: &mut ChaCha8Rng) -> Matrix<f64> {
    random_subspace(r, r, rng).basis
}

pub fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}
