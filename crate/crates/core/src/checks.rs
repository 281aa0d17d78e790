//! Self-checks behind the `grad-check` and `eig-check` commands: analytic
//! gradients against central finite differences, and decomposition identities.
//!
//! Gradient errors are reported as `max|analytic − fd| / max|fd|`.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::adapt::{tta_objective, Objective, TextPrior, TtaConfig};
use crate::encoder::ToyEncoder;
use crate::error::Result;
use crate::linalg::{principal_angles, svd_small, sym_eig, Matrix, SymMatrix};
use crate::objective::{entropy_objective, icv_objective};
use crate::predictor::{softmax, TextAnchorSet};
use crate::scalar::norm;
use crate::subspace::{chordal_loss, chordal_loss_grad, ema_blend, extract_subspace, subspace_from_eig, Subspace};

pub const ALIGN_GRAD_TOL: f64 = 1e-4;
pub const ENCODER_GRAD_TOL: f64 = 1e-5;
pub const OBJECTIVE_GRAD_TOL: f64 = 1e-6;
pub const TTA_CHAIN_TOL: f64 = 1e-5;
/// Instances whose eigengap falls below this are excluded from the alignment checks.
pub const MIN_CHECK_GAP: f64 = 1e-6;
pub const CHECK_SEEDS: u64 = 20;

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: &'static str,
    pub worst: f64,
    pub tol: f64,
    pub cases: usize,
    pub skipped: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.worst <= self.tol && self.cases > 0
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<5} {:<26} worst {:.3e} (tol {:.0e}, {} cases",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.worst,
            self.tol,
            self.cases
        )?;
        if self.skipped > 0 {
            write!(f, ", {} skipped", self.skipped)?;
        }
        f.write_str(")")
    }
}

pub fn relative_error(analytic: &[f64], fd: &[f64]) -> f64 {
    let diff = analytic.iter().zip(fd).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    let scale = fd.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    diff / scale.max(1e-12)
}

/// Central differences of `f` at `x`.
pub fn central_diff(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|k| {
            probe[k] = x[k] + h;
            let up = f(&probe);
            probe[k] = x[k] - h;
            let down = f(&probe);
            probe[k] = x[k];
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix<f64> {
    let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    Matrix::from_vec(rows, cols, data).expect("shape")
}

fn unit_rows(mut m: Matrix<f64>) -> Matrix<f64> {
    for i in 0..m.rows() {
        let row = m.row_mut(i);
        let n = norm(row);
        row.iter_mut().for_each(|x| *x /= n);
    }
    m
}

/// A random alignment instance: text basis, covariance history, batch.
pub struct AlignInstance {
    pub bt: Subspace<f64>,
    pub sigma_old: SymMatrix<f64>,
    pub batch: Matrix<f64>,
    pub alpha: f64,
    pub rank: usize,
}

impl AlignInstance {
    pub fn random(d: usize, r: usize, b: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let anchors = unit_rows(gaussian(r, d, &mut rng));
        let sigma_t = SymMatrix::new(anchors.gram())?;
        let bt = extract_subspace(&sigma_t, r)?;
        let history = unit_rows(gaussian(3 * d, d, &mut rng)).gram().scaled(1.0 / (3 * d) as f64);
        let sigma_old = SymMatrix::symmetrized(sigma_t.add_scaled(&history, 1.0)?.scaled(0.5))?;
        let batch = unit_rows(gaussian(b, d, &mut rng));
        Ok(Self {
            bt,
            sigma_old,
            batch,
            alpha: rng.random_range(0.2..0.8),
            rank: r,
        })
    }

    pub fn loss_at(&self, batch: &Matrix<f64>) -> Result<f64> {
        let sigma = ema_blend(&self.sigma_old, batch, self.alpha)?;
        chordal_loss(&self.bt, &extract_subspace(&sigma, self.rank)?)
    }

    pub fn eigengap(&self) -> Result<f64> {
        let eig = sym_eig(&ema_blend(&self.sigma_old, &self.batch, self.alpha)?)?;
        Ok(eig.values[self.rank - 1] - eig.values[self.rank])
    }
}

/// Alignment gradient with respect to the batch rows.
pub fn check_alignment_grad(seed: u64) -> Result<CheckResult> {
    let (mut worst, mut cases, mut skipped) = (0.0f64, 0, 0);
    for s in seed..seed + CHECK_SEEDS {
        let inst = AlignInstance::random(12, 3, 8, s)?;
        if inst.eigengap()? < MIN_CHECK_GAP {
            skipped += 1;
            continue;
        }
        let eig = sym_eig(&ema_blend(&inst.sigma_old, &inst.batch, inst.alpha)?)?;
        let g = chordal_loss_grad(&inst.bt, &eig, &inst.batch, inst.alpha, inst.rank)?;
        let (rows, cols) = inst.batch.shape();
        let fd = central_diff(inst.batch.as_slice(), 1e-5, |v| {
            let m = Matrix::from_vec(rows, cols, v.to_vec()).expect("shape");
            inst.loss_at(&m).expect("finite instance")
        });
        worst = worst.max(relative_error(g.d_loss_d_batch.as_slice(), &fd));
        cases += 1;
    }
    Ok(CheckResult {
        name: "alignment_grad_batch",
        worst,
        tol: ALIGN_GRAD_TOL,
        cases,
        skipped,
    })
}

fn perturbed_encoder(d: usize, rng: &mut ChaCha8Rng) -> ToyEncoder<f64> {
    let mut enc = ToyEncoder::new(d);
    let dg: Vec<f64> = (0..d).map(|_| 0.3 * rng.random_range(-1.0..1.0)).collect();
    let db: Vec<f64> = (0..d).map(|_| 0.3 * rng.random_range(-1.0..1.0)).collect();
    enc.apply_update(&dg, &db);
    enc
}

fn with_params(enc: &ToyEncoder<f64>, flat: &[f64]) -> ToyEncoder<f64> {
    let d = enc.dim();
    let mut e = enc.clone();
    e.gamma.copy_from_slice(&flat[..d]);
    e.beta.copy_from_slice(&flat[d..]);
    e
}

fn params(enc: &ToyEncoder<f64>) -> Vec<f64> {
    enc.gamma.iter().chain(&enc.beta).copied().collect()
}

/// Alignment loss differentiated all the way to gamma and beta.
pub fn check_alignment_to_params(seed: u64) -> Result<CheckResult> {
    let (mut worst, mut cases, mut skipped) = (0.0f64, 0, 0);
    for s in seed..seed + CHECK_SEEDS {
        let inst = AlignInstance::random(12, 3, 8, s)?;
        let mut rng = ChaCha8Rng::seed_from_u64(s ^ 0x5eed);
        let enc = perturbed_encoder(12, &mut rng);
        let x = gaussian(8, 12, &mut rng);
        let v = enc.forward(&x)?.embeddings;
        let eig = sym_eig(&ema_blend(&inst.sigma_old, &v, inst.alpha)?)?;
        if eig.values[2] - eig.values[3] < MIN_CHECK_GAP {
            skipped += 1;
            continue;
        }
        let g = chordal_loss_grad(&inst.bt, &eig, &v, inst.alpha, 3)?;
        let analytic = enc.backward(&x, &g.d_loss_d_batch)?.flatten();
        let fd = central_diff(&params(&enc), 1e-6, |p| {
            let v = with_params(&enc, p).forward(&x).expect("forward").embeddings;
            inst.loss_at(&v).expect("finite instance")
        });
        worst = worst.max(relative_error(&analytic, &fd));
        cases += 1;
    }
    Ok(CheckResult {
        name: "alignment_grad_params",
        worst,
        tol: ALIGN_GRAD_TOL,
        cases,
        skipped,
    })
}

/// Encoder backward pass against a random linear functional of its output.
pub fn check_encoder_backward(seed: u64) -> Result<CheckResult> {
    let mut worst = 0.0f64;
    for s in seed..seed + CHECK_SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let enc = perturbed_encoder(8, &mut rng);
        let x = gaussian(4, 8, &mut rng);
        let up = gaussian(4, 8, &mut rng);
        let analytic = enc.backward(&x, &up)?.flatten();
        let fd = central_diff(&params(&enc), 1e-6, |p| {
            let v = with_params(&enc, p).forward(&x).expect("forward").embeddings;
            crate::scalar::dot(v.as_slice(), up.as_slice())
        });
        worst = worst.max(relative_error(&analytic, &fd));
    }
    Ok(CheckResult {
        name: "encoder_backward",
        worst,
        tol: ENCODER_GRAD_TOL,
        cases: CHECK_SEEDS as usize,
        skipped: 0,
    })
}

fn probs_of(logits: &Matrix<f64>) -> Matrix<f64> {
    let mut p = Matrix::zeros(logits.rows(), logits.cols());
    for i in 0..logits.rows() {
        p.row_mut(i).copy_from_slice(&softmax(logits.row(i), 1.0));
    }
    p
}

pub fn check_entropy_grad(seed: u64) -> Result<CheckResult> {
    let mut worst = 0.0f64;
    for s in seed..seed + CHECK_SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let logits = gaussian(4, 5, &mut rng);
        let (_, analytic) = entropy_objective(&probs_of(&logits));
        let fd = central_diff(logits.as_slice(), 1e-5, |l| {
            entropy_objective(&probs_of(&Matrix::from_vec(4, 5, l.to_vec()).expect("shape"))).0
        });
        worst = worst.max(relative_error(analytic.as_slice(), &fd));
    }
    Ok(CheckResult {
        name: "entropy_grad",
        worst,
        tol: OBJECTIVE_GRAD_TOL,
        cases: CHECK_SEEDS as usize,
        skipped: 0,
    })
}

pub fn check_icv_grad(seed: u64) -> Result<CheckResult> {
    let mut worst = 0.0f64;
    for s in seed..seed + CHECK_SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let e = unit_rows(gaussian(12, 6, &mut rng));
        let labels: Vec<usize> = (0..12).map(|i| (i * 7 + s as usize) % 3).collect();
        let analytic = icv_objective(&e, &labels, 3)?.grad;
        let fd = central_diff(e.as_slice(), 1e-5, |v| {
            let m = Matrix::from_vec(12, 6, v.to_vec()).expect("shape");
            icv_objective(&m, &labels, 3).expect("labels in range").loss
        });
        worst = worst.max(relative_error(analytic.as_slice(), &fd));
    }
    Ok(CheckResult {
        name: "icv_grad",
        worst,
        tol: OBJECTIVE_GRAD_TOL,
        cases: CHECK_SEEDS as usize,
        skipped: 0,
    })
}

/// Objective gradient through softmax, row normalization, projection and encoder.
pub fn check_tta_chain(seed: u64) -> Result<CheckResult> {
    let mut worst = 0.0f64;
    let mut cases = 0;
    for s in seed..seed + CHECK_SEEDS / 2 {
        for objective in [Objective::Entropy, Objective::InterClassVariance] {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let anchors = TextAnchorSet::normalized(gaussian(4, 10, &mut rng), Vec::new())?;
            let prior = TextPrior::new(anchors, 4)?;
            let enc = perturbed_encoder(10, &mut rng);
            let x = gaussian(6, 10, &mut rng);
            let mut cfg = TtaConfig::for_classes(4);
            cfg.objective = objective;
            cfg.temperature = 0.5;
            let analytic = tta_objective(&enc, &x, &prior, &cfg)?.grad.flatten();
            let fd = central_diff(&params(&enc), 1e-6, |p| {
                tta_objective(&with_params(&enc, p), &x, &prior, &cfg).expect("objective").loss
            });
            worst = worst.max(relative_error(&analytic, &fd));
            cases += 1;
        }
    }
    Ok(CheckResult {
        name: "tta_objective_params",
        worst,
        tol: TTA_CHAIN_TOL,
        cases,
        skipped: 0,
    })
}

pub fn grad_checks(seed: u64) -> Result<Vec<CheckResult>> {
    Ok(vec![
        check_alignment_grad(seed)?,
        check_alignment_to_params(seed)?,
        check_encoder_backward(seed)?,
        check_entropy_grad(seed)?,
        check_icv_grad(seed)?,
        check_tta_chain(seed)?,
    ])
}

fn random_symmetric(n: usize, rng: &mut ChaCha8Rng) -> SymMatrix<f64> {
    let g = gaussian(n, n, rng);
    SymMatrix::symmetrized(g.add_scaled(&g.transpose(), 1.0).expect("square")).expect("finite")
}

/// Decomposition identities on random inputs.
pub fn eig_checks(seed: u64) -> Result<Vec<CheckResult>> {
    let mut recon = 0.0f64;
    let mut ortho = 0.0f64;
    let mut trace = 0.0f64;
    let mut order = 0.0f64;
    let mut sign = 0.0f64;
    let sizes = [2usize, 3, 8, 16, 64];
    for (k, &n) in sizes.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + k as u64);
        let m = random_symmetric(n, &mut rng);
        let eig = sym_eig(&m)?;
        let scale = m.frobenius_norm();
        recon = recon.max(eig.reconstruct().sub(m.matrix())?.frobenius_norm() / scale);
        ortho = ortho.max(eig.vectors.transpose().row_orthonormality_error());
        trace = trace.max((eig.values.iter().sum::<f64>() - m.trace()).abs() / scale);
        for w in eig.values.windows(2) {
            order = order.max(w[1] - w[0]);
        }
        for j in 0..n {
            let col = eig.vector(j);
            let lead = col
                .iter()
                .enumerate()
                .fold(0, |b, (i, x)| if x.abs() > col[b].abs() { i } else { b });
            if col[lead] < 0.0 {
                sign = 1.0;
            }
        }
    }

    let mut svd_err = 0.0f64;
    for k in 0..4 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100 + k);
        let m = gaussian(4 + k as usize, 4 + k as usize, &mut rng);
        let svd = svd_small(&m)?;
        svd_err = svd_err.max(svd.reconstruct().sub(&m)?.frobenius_norm() / m.frobenius_norm());
    }

    let h = std::f64::consts::FRAC_1_SQRT_2;
    let a = Matrix::from_rows(&[[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]])?;
    let b = Matrix::from_rows(&[[1.0, 0.0, 0.0, 0.0], [0.0, h, h, 0.0]])?;
    let pa = principal_angles(&a, &b)?;
    let angle_err = pa.angles[0].abs().max((pa.angles[1] - std::f64::consts::FRAC_PI_4).abs());

    let mut rng = ChaCha8Rng::seed_from_u64(seed + 200);
    let m = random_symmetric(16, &mut rng);
    let psd = SymMatrix::new(m.gram())?;
    let sub = subspace_from_eig(&sym_eig(&psd)?, 4)?;
    let rayleigh = sub
        .basis
        .matmul(psd.matrix())?
        .matmul_t(&sub.basis)?
        .sub(&Matrix::from_diag(&sub.eigenvalues))?
        .frobenius_norm();

    let case = |name, worst, tol, cases| CheckResult {
        name,
        worst,
        tol,
        cases,
        skipped: 0,
    };
    Ok(vec![
        case("eig_reconstruction", recon, 1e-8, sizes.len()),
        case("eig_orthonormality", ortho, 1e-10, sizes.len()),
        case("eig_trace", trace, 1e-8, sizes.len()),
        case("eig_descending", order, 0.0, sizes.len()),
        case("eig_sign_convention", sign, 0.0, sizes.len()),
        case("svd_reconstruction", svd_err, 1e-8, 4),
        case("principal_angles_tilted", angle_err, 1e-7, 1),
        case("rayleigh_residual", rayleigh, 1e-8 * psd.frobenius_norm(), 1),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_grad_checks_pass() {
        for r in grad_checks(7).unwrap() {
            assert!(r.passed(), "{r}");
        }
    }

    #[test]
    fn all_eig_checks_pass() {
        for r in eig_checks(7).unwrap() {
            assert!(r.passed(), "{r}");
        }
    }

    #[test]
    fn relative_error_is_scale_free() {
        assert_eq!(relative_error(&[2.0, 4.0], &[2.0, 4.0]), 0.0);
        assert!((relative_error(&[1.0, 2.2], &[1.0, 2.0]) - 0.1).abs() < 1e-12);
    }
}
