//! Seeded synthetic benchmark with a graded modality gap and class-correlated
//! visual nuisance.
//!
//! Anchors are orthonormal and zero-mean, so the layer normalization of a
//! fresh encoder leaves their geometry intact. Each sample is built as:
//!
//! 1. clean: `normalize(t_c + σ g)` with `g` Gaussian in the anchor span;
//! 2. nuisance: add `κ n`, where `n` is a unit Gaussian direction drawn inside
//!    one of two fixed complement blocks picked by class parity;
//! 3. optional drift: rotate each anchor coordinate toward its own complement
//!    direction by `θ`;
//! 4. gap: flip the sign of a seeded, severity-nested set of channels, then
//!    renormalize.
//!
//! Channel flips are the part a per-channel affine can undo exactly, and the
//! part the alignment loss sees as a rotated visual subspace.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::predictor::{Prediction, TextAnchorSet};
use crate::scalar::{dot, Real};

pub const MAX_SEVERITY: u32 = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub d: usize,
    pub classes: usize,
    pub samples_per_class: usize,
    /// 0 disables every shift; 1..=5 scales them linearly.
    pub severity: u32,
    pub rotation_max_deg: f64,
    /// Squared nuisance norm relative to the unit signal at severity 5.
    pub nuisance_max: f64,
    /// Fraction of channels with inverted polarity at severity 5.
    pub flip_fraction_max: f64,
    pub within_class_noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            d: 64,
            classes: 10,
            samples_per_class: 320,
            severity: 5,
            rotation_max_deg: 0.0,
            nuisance_max: 1.0,
            flip_fraction_max: 0.25,
            within_class_noise: 0.1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config("need at least 2 classes".into()));
        }
        if 2 * self.classes > self.d {
            return Err(Error::Config(format!(
                "{} classes need d >= {}, got {}",
                self.classes,
                2 * self.classes,
                self.d
            )));
        }
        if self.severity > MAX_SEVERITY {
            return Err(Error::Config(format!("severity {} outside 0..=5", self.severity)));
        }
        if self.rotation_max_deg != 0.0 && self.complement_dim() < self.classes {
            return Err(Error::Config(format!(
                "rotation needs {} complement directions, only {} available",
                self.classes,
                self.complement_dim()
            )));
        }
        for (name, v) in [
            ("rotation_max_deg", self.rotation_max_deg),
            ("nuisance_max", self.nuisance_max),
            ("flip_fraction_max", self.flip_fraction_max),
            ("within_class_noise", self.within_class_noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and non-negative")));
            }
        }
        if self.flip_fraction_max > 1.0 {
            return Err(Error::Config("flip_fraction_max exceeds 1".into()));
        }
        Ok(())
    }

    fn complement_dim(&self) -> usize {
        self.d - 1 - self.classes
    }

    fn level(&self) -> f64 {
        self.severity as f64 / MAX_SEVERITY as f64
    }

    pub fn rotation_rad(&self) -> f64 {
        (self.level() * self.rotation_max_deg).to_radians()
    }

    pub fn nuisance_scale(&self) -> f64 {
        (self.level() * self.nuisance_max).sqrt()
    }

    pub fn flipped_channels(&self) -> usize {
        (self.level() * self.flip_fraction_max * self.d as f64).round() as usize
    }

    pub fn total_samples(&self) -> usize {
        self.classes * self.samples_per_class
    }
}

#[derive(Clone, Debug)]
pub struct SynthDataset<T> {
    pub anchors: TextAnchorSet<T>,
    /// Shifted samples in stream order.
    pub x: Matrix<T>,
    pub labels: Vec<usize>,
    pub clean: Matrix<T>,
}

impl<T: Real> SynthDataset<T> {
    /// `(rows, labels)` in consecutive chunks of `batch_size`.
    pub fn batches(&self, batch_size: usize) -> impl Iterator<Item = (Matrix<T>, &[usize])> + '_ {
        let n = self.x.rows();
        (0..n.div_ceil(batch_size.max(1))).map(move |b| {
            let start = b * batch_size;
            let end = (start + batch_size).min(n);
            (self.x.row_range(start, end), &self.labels[start..end])
        })
    }
}

/// Unit vectors orthogonal to each other and to the all-ones vector.
fn zero_mean_orthonormal(d: usize, count: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let mean = v.iter().sum::<f64>() / d as f64;
        v.iter_mut().for_each(|x| *x -= mean);
        // Two Gram-Schmidt passes for orthogonality to working precision.
        for _ in 0..2 {
            for b in &basis {
                let p = dot(&v, b);
                v.iter_mut().zip(b).for_each(|(x, &y)| *x -= p * y);
            }
        }
        let n = dot(&v, &v).sqrt();
        if n > 1e-8 {
            v.iter_mut().for_each(|x| *x /= n);
            basis.push(v);
        }
    }
    basis
}

fn normalize(v: &mut [f64]) {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

pub fn generate<T: Real>(cfg: &SynthConfig) -> Result<SynthDataset<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (d, c) = (cfg.d, cfg.classes);

    // The draw sequence does not depend on severity, so a seed fixes the same
    // anchors, labels and noise at every level.
    let dirs = zero_mean_orthonormal(d, d - 1, &mut rng);
    let (anchor_rows, rest) = dirs.split_at(c);
    let half = rest.len() / 2;
    let blocks = [&rest[..half], &rest[half..2 * half]];

    let mut perm: Vec<usize> = (0..d).collect();
    perm.shuffle(&mut rng);

    let mut labels: Vec<usize> = (0..cfg.total_samples()).map(|i| i % c).collect();
    labels.shuffle(&mut rng);

    let theta = cfg.rotation_rad();
    let kappa = cfg.nuisance_scale();
    let mut flips = vec![1.0; d];
    for &ch in &perm[..cfg.flipped_channels()] {
        flips[ch] = -1.0;
    }

    let n = labels.len();
    let mut x = Matrix::zeros(n, d);
    let mut clean = Matrix::zeros(n, d);
    for (i, &y) in labels.iter().enumerate() {
        let mut coef: Vec<f64> = (0..c)
            .map(|_| {
                let g: f64 = StandardNormal.sample(&mut rng);
                cfg.within_class_noise * g
            })
            .collect();
        coef[y] += 1.0;
        let mut v = vec![0.0; d];
        for (a, t) in coef.iter().zip(anchor_rows) {
            v.iter_mut().zip(t).for_each(|(x, &ti)| *x += a * ti);
        }
        normalize(&mut v);

        let block = blocks[y % 2];
        let mut nuisance = vec![0.0; d];
        for b in block {
            let g: f64 = StandardNormal.sample(&mut rng);
            nuisance.iter_mut().zip(b).for_each(|(x, &bi)| *x += g * bi);
        }
        normalize(&mut nuisance);

        let mut z: Vec<f64> = v.iter().zip(&nuisance).map(|(&a, &b)| a + kappa * b).collect();
        if theta != 0.0 {
            for (t, u) in anchor_rows.iter().zip(rest) {
                let a = dot(&v, t);
                let (ct, st) = (theta.cos() - 1.0, theta.sin());
                for k in 0..d {
                    z[k] += a * (ct * t[k] + st * u[k]);
                }
            }
        }
        z.iter_mut().zip(&flips).for_each(|(x, &f)| *x *= f);
        normalize(&mut z);

        for k in 0..d {
            x[(i, k)] = T::of(z[k]);
            clean[(i, k)] = T::of(v[k]);
        }
    }

    let mut anchors = Matrix::zeros(c, d);
    for (i, t) in anchor_rows.iter().enumerate() {
        for k in 0..d {
            anchors[(i, k)] = T::of(t[k]);
        }
    }
    Ok(SynthDataset {
        anchors: TextAnchorSet::normalized(anchors, Vec::new())?,
        x,
        labels,
        clean,
    })
}

/// Fraction of predictions that match the labels.
pub fn oracle_accuracy<T: Real>(labels: &[usize], predictions: &[Prediction<T>]) -> Result<f64> {
    if labels.len() != predictions.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} labels vs {} predictions",
            labels.len(),
            predictions.len()
        )));
    }
    if labels.is_empty() {
        return Ok(0.0);
    }
    let hits = labels
        .iter()
        .zip(predictions)
        .filter(|(&y, p)| p.class_index == y)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictor::zero_shot_rows;

    fn small(severity: u32) -> SynthConfig {
        SynthConfig {
            d: 32,
            classes: 4,
            samples_per_class: 25,
            severity,
            seed: 9,
            ..SynthConfig::default()
        }
    }

    fn pred(c: usize) -> Prediction<f64> {
        Prediction {
            class_index: c,
            score: 1.0,
            probs: vec![],
            no_signal: false,
        }
    }

    #[test]
    fn severity_zero_is_clean() {
        let ds = generate::<f64>(&small(0)).unwrap();
        assert!(ds.x.max_abs_diff(&ds.clean) < 1e-12);
    }

    #[test]
    fn noiseless_clean_data_is_perfect() {
        let cfg = SynthConfig {
            within_class_noise: 0.0,
            ..small(0)
        };
        let ds = generate::<f64>(&cfg).unwrap();
        let preds = zero_shot_rows(&ds.x, &ds.anchors, 0.01);
        assert_eq!(oracle_accuracy(&ds.labels, &preds).unwrap(), 1.0);
    }

    #[test]
    fn anchors_are_zero_mean_orthonormal() {
        let ds = generate::<f64>(&small(3)).unwrap();
        let t = ds.anchors.matrix();
        assert!(t.row_orthonormality_error() < 1e-12);
        for row in t.row_iter() {
            assert!(row.iter().sum::<f64>().abs() < 1e-12);
        }
    }

    #[test]
    fn generation_is_pure() {
        let a = generate::<f64>(&small(5)).unwrap();
        let b = generate::<f64>(&small(5)).unwrap();
        assert_eq!(a.x, b.x);
        assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn labels_are_balanced() {
        let ds = generate::<f64>(&small(2)).unwrap();
        for c in 0..4 {
            assert_eq!(ds.labels.iter().filter(|&&y| y == c).count(), 25);
        }
    }

    #[test]
    fn too_many_classes() {
        let cfg = SynthConfig {
            d: 10,
            classes: 6,
            ..SynthConfig::default()
        };
        assert!(matches!(generate::<f64>(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn rotation_variant_generates() {
        let cfg = SynthConfig {
            rotation_max_deg: 40.0,
            ..small(5)
        };
        let ds = generate::<f64>(&cfg).unwrap();
        for row in ds.x.row_iter() {
            assert!((dot(row, row) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn oracle_accuracy_cases() {
        let labels: Vec<usize> = (0..100).map(|i| i % 2).collect();
        let right: Vec<_> = labels.iter().map(|&y| pred(y)).collect();
        let wrong: Vec<_> = labels.iter().map(|&y| pred(1 - y)).collect();
        let half: Vec<_> = labels.iter().enumerate().map(|(i, &y)| pred(if i < 50 { y } else { 1 - y })).collect();
        assert_eq!(oracle_accuracy(&labels, &right).unwrap(), 1.0);
        assert_eq!(oracle_accuracy(&labels, &wrong).unwrap(), 0.0);
        assert_eq!(oracle_accuracy(&labels, &half).unwrap(), 0.5);
        assert!(oracle_accuracy(&labels, &right[..3]).is_err());
    }
}
