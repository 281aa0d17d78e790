//! Online adaptation loop: per batch, align the visual subspace to the text
//! subspace, then run a test-time objective on projected features.

use std::fmt;
use std::str::FromStr;

use crate::encoder::{ParamGradient, ToyEncoder};
use crate::error::{Error, Result};
use crate::linalg::{sym_eig, Matrix, SymMatrix};
use crate::objective::{entropy_objective, icv_objective};
use crate::optim::{AdamOutcome, AdamParams, AdamState};
use crate::predictor::{semantic_concentration, softmax, zero_shot_rows, Prediction, TextAnchorSet};
use crate::scalar::{argmax, dot, norm, Real};
use crate::subspace::{
    chordal_loss, chordal_loss_grad, ema_blend, extract_subspace, subspace_angles, subspace_from_eig,
    text_covariance, CovarianceTracker, Subspace,
};

/// Number of leading/trailing batches averaged in run summaries.
pub const SUMMARY_WINDOW: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    Entropy,
    /// Between-cluster scatter surrogate of an inter-class variance loss.
    InterClassVariance,
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Objective::Entropy => "entropy",
            Objective::InterClassVariance => "icv",
        })
    }
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "entropy" => Ok(Objective::Entropy),
            "icv" => Ok(Objective::InterClassVariance),
            other => Err(Error::Config(format!("unknown objective {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TtaConfig<T> {
    pub rank: usize,
    pub alpha: T,
    pub batch_size: usize,
    pub lr: T,
    pub align_steps: usize,
    pub tta_steps: usize,
    pub objective: Objective,
    pub temperature: T,
    pub seed: u64,
    pub align: bool,
    pub project: bool,
    pub reset_between_segments: bool,
}

impl<T: Real> TtaConfig<T> {
    /// Defaults with rank `min(C, 64)`.
    pub fn for_classes(num_classes: usize) -> Self {
        Self {
            rank: num_classes.clamp(1, 64),
            alpha: T::of(0.5),
            batch_size: 64,
            lr: T::of(0.02),
            align_steps: 1,
            tta_steps: 1,
            objective: Objective::Entropy,
            temperature: T::of(0.01),
            seed: 0,
            align: true,
            project: true,
            reset_between_segments: false,
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("rank must be at least 1".into()));
        }
        if self.rank > dim {
            return Err(Error::RankTooLarge { rank: self.rank, dim });
        }
        if !(self.alpha >= T::zero() && self.alpha <= T::one()) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.temperature > T::zero()) {
            return Err(Error::Config(format!("temperature {} must be positive", self.temperature)));
        }
        if !(self.lr >= T::zero()) {
            return Err(Error::Config(format!("learning rate {} must be non-negative", self.lr)));
        }
        Ok(())
    }

    /// Both geometric components off: predictions are plain zero-shot on the input.
    pub fn is_zero_shot(&self) -> bool {
        !self.align && !self.project
    }
}

/// Quantities fixed for a task: anchors, `Σ_T` and `B_T`.
#[derive(Clone, Debug)]
pub struct TextPrior<T> {
    pub anchors: TextAnchorSet<T>,
    pub sigma_t: SymMatrix<T>,
    pub bt: Subspace<T>,
}

impl<T: Real> TextPrior<T> {
    pub fn new(anchors: TextAnchorSet<T>, rank: usize) -> Result<Self> {
        let sigma_t = text_covariance(anchors.matrix())?;
        let bt = extract_subspace(&sigma_t, rank)?;
        Ok(Self { anchors, sigma_t, bt })
    }

    pub fn dim(&self) -> usize {
        self.anchors.dim()
    }
}

/// Mutable per-stream state.
#[derive(Clone, Debug)]
pub struct AdaptState<T> {
    pub encoder: ToyEncoder<T>,
    pub tracker: CovarianceTracker<T>,
    pub align_opt: AdamState<T>,
    pub tta_opt: AdamState<T>,
}

impl<T: Real> AdaptState<T> {
    pub fn new(prior: &TextPrior<T>, encoder: ToyEncoder<T>, cfg: &TtaConfig<T>) -> Result<Self> {
        if encoder.dim() != prior.dim() {
            return Err(Error::DimensionMismatch(format!(
                "encoder dim {} vs anchor dim {}",
                encoder.dim(),
                prior.dim()
            )));
        }
        let n = 2 * encoder.dim();
        Ok(Self {
            tracker: CovarianceTracker::from_text_prior(&prior.sigma_t, cfg.alpha)?,
            align_opt: AdamState::new(n, AdamParams::with_lr(cfg.lr)),
            tta_opt: AdamState::new(n, AdamParams::with_lr(cfg.lr)),
            encoder,
        })
    }

    /// Restores the initial encoder, covariance prior and optimizer moments.
    pub fn reset(&mut self, prior: &TextPrior<T>) {
        self.encoder.reset();
        self.tracker.sigma = prior.sigma_t.clone();
        self.align_opt.reset();
        self.tta_opt.reset();
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Alignment,
    Tta,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport<T> {
    pub step: usize,
    pub segment: usize,
    pub batch_len: usize,
    pub align_loss_before: T,
    pub align_loss_after: T,
    pub tta_loss: T,
    pub batch_accuracy: Option<T>,
    pub mean_semantic_concentration: T,
    pub subspace_principal_angles: Vec<T>,
    pub dropped_gap_terms: usize,
    pub degenerate_rows: usize,
    pub no_signal_rows: usize,
    pub single_cluster: bool,
    pub skipped: Vec<Stage>,
}

impl<T: Real> StepReport<T> {
    pub fn max_principal_angle_deg(&self) -> T {
        self.subspace_principal_angles
            .iter()
            .fold(T::zero(), |m, &a| m.max(a))
            .to_degrees()
    }
}

/// Objective value and parameter gradient for one batch.
#[derive(Clone, Debug)]
pub struct TtaEval<T> {
    pub loss: T,
    pub grad: ParamGradient<T>,
    pub no_signal_rows: usize,
    pub single_cluster: bool,
}

/// Features fed to the classifier head: projected when enabled.
fn head_features<T: Real>(v: &Matrix<T>, prior: &TextPrior<T>, project: bool) -> Result<Matrix<T>> {
    if project {
        crate::predictor::project_rows(v, &prior.bt)
    } else {
        Ok(v.clone())
    }
}

/// Test-time objective on (projected) features and its gradient to gamma and beta.
///
/// Logits are `ŵ·t_c / τ` with `ŵ` the unit-normalized head feature; the
/// gradient runs back through that normalization, the projector and the encoder.
pub fn tta_objective<T: Real>(
    encoder: &ToyEncoder<T>,
    x: &Matrix<T>,
    prior: &TextPrior<T>,
    cfg: &TtaConfig<T>,
) -> Result<TtaEval<T>> {
    let v = encoder.forward(x)?.embeddings;
    let w = head_features(&v, prior, cfg.project)?;
    let (b, d) = w.shape();
    let anchors = prior.anchors.matrix();
    let c = anchors.rows();

    let mut unit = Matrix::zeros(b, d);
    let mut norms = vec![T::zero(); b];
    let mut no_signal_rows = 0;
    for i in 0..b {
        let n = norm(w.row(i));
        norms[i] = n;
        if n > T::zero() {
            for (u, &x) in unit.row_mut(i).iter_mut().zip(w.row(i)) {
                *u = x / n;
            }
        } else {
            no_signal_rows += 1;
        }
    }

    let cos = unit.matmul_t(anchors)?;
    let (loss, d_unit, single_cluster) = match cfg.objective {
        Objective::Entropy => {
            let mut probs = Matrix::zeros(b, c);
            for i in 0..b {
                probs.row_mut(i).copy_from_slice(&softmax(cos.row(i), cfg.temperature));
            }
            let (loss, d_logits) = entropy_objective(&probs);
            let d_unit = d_logits.matmul(anchors)?.scaled(T::one() / cfg.temperature);
            (loss, d_unit, false)
        }
        Objective::InterClassVariance => {
            let pseudo: Vec<usize> = cos.row_iter().map(argmax).collect();
            let out = icv_objective(&unit, &pseudo, c)?;
            if out.single_cluster {
                log::debug!("icv surrogate: single pseudo-class in batch");
            }
            (out.loss, out.grad, out.single_cluster)
        }
    };

    let mut d_w = Matrix::zeros(b, d);
    for i in 0..b {
        if norms[i] == T::zero() {
            continue;
        }
        let u = unit.row(i);
        let g = d_unit.row(i);
        let along = dot(u, g);
        for k in 0..d {
            d_w[(i, k)] = (g[k] - u[k] * along) / norms[i];
        }
    }
    let d_v = head_features(&d_w, prior, cfg.project)?;
    let grad = encoder.backward(x, &d_v)?;
    Ok(TtaEval {
        loss,
        grad,
        no_signal_rows,
        single_cluster,
    })
}

fn apply_adam<T: Real>(opt: &mut AdamState<T>, encoder: &mut ToyEncoder<T>, grad: &ParamGradient<T>) -> bool {
    match opt.step(&grad.flatten()) {
        AdamOutcome::Delta(delta) => {
            encoder.apply_flat(&delta);
            true
        }
        AdamOutcome::Skipped => false,
    }
}

fn is_blowup(e: &Error) -> bool {
    matches!(e, Error::NumericalBlowup(_) | Error::NoConvergence { .. })
}

fn accuracy<T: Real>(preds: &[Prediction<T>], labels: Option<&[usize]>) -> Option<T> {
    let labels = labels?;
    if preds.is_empty() {
        return None;
    }
    let hits = preds.iter().zip(labels).filter(|(p, &y)| p.class_index == y).count();
    Some(T::of_usize(hits) / T::of_usize(preds.len()))
}

fn mean_concentration<T: Real>(v: &Matrix<T>, bt: &Subspace<T>) -> T {
    let vals: Vec<T> = v.row_iter().filter_map(|r| semantic_concentration(r, bt).ok()).collect();
    if vals.is_empty() {
        return T::nan();
    }
    vals.iter().copied().sum::<T>() / T::of_usize(vals.len())
}

/// One online step on a raw batch. The state is updated in place.
pub fn adapt_batch<T: Real>(
    state: &mut AdaptState<T>,
    prior: &TextPrior<T>,
    x: &Matrix<T>,
    labels: Option<&[usize]>,
    cfg: &TtaConfig<T>,
) -> Result<(StepReport<T>, Vec<Prediction<T>>)> {
    if let Some(l) = labels {
        if l.len() != x.rows() {
            return Err(Error::DimensionMismatch(format!("{} labels for {} rows", l.len(), x.rows())));
        }
    }
    let r = cfg.rank;
    let bt = &prior.bt;
    let mut skipped = Vec::new();
    let mut dropped_gap_terms = 0;

    let encoded = state.encoder.forward(x)?;
    let degenerate_rows = encoded.degenerate_rows.len();
    let v = encoded.embeddings;
    let sigma_old = state.tracker.sigma.clone();
    let committed = state.tracker.ema_update(&v)?;
    let eig = sym_eig(&committed.sigma)?;
    let bv = subspace_from_eig(&eig, r)?;
    let align_loss_before = chordal_loss(bt, &bv)?;
    let subspace_principal_angles = subspace_angles(bt, &bv)?.angles;

    if cfg.is_zero_shot() {
        state.tracker = committed;
        let preds = zero_shot_rows(x, &prior.anchors, cfg.temperature);
        let mut probs = Matrix::zeros(preds.len(), prior.anchors.num_classes());
        for (i, p) in preds.iter().enumerate() {
            probs.row_mut(i).copy_from_slice(&p.probs);
        }
        let report = StepReport {
            step: 0,
            segment: 0,
            batch_len: x.rows(),
            align_loss_before,
            align_loss_after: align_loss_before,
            tta_loss: entropy_objective(&probs).0,
            batch_accuracy: accuracy(&preds, labels),
            mean_semantic_concentration: mean_concentration(x, bt),
            subspace_principal_angles,
            dropped_gap_terms,
            degenerate_rows,
            no_signal_rows: preds.iter().filter(|p| p.no_signal).count(),
            single_cluster: false,
            skipped,
        };
        return Ok((report, preds));
    }

    // Step 1: geometric alignment.
    if cfg.align {
        for s in 0..cfg.align_steps {
            let step = (|| -> Result<ParamGradient<T>> {
                let (v_s, eig_s) = if s == 0 {
                    (v.clone(), eig.clone())
                } else {
                    let v_s = state.encoder.forward(x)?.embeddings;
                    let e = sym_eig(&ema_blend(&sigma_old, &v_s, cfg.alpha)?)?;
                    (v_s, e)
                };
                let g = chordal_loss_grad(bt, &eig_s, &v_s, cfg.alpha, r)?;
                dropped_gap_terms += g.dropped_terms;
                state.encoder.backward(x, &g.d_loss_d_batch)
            })();
            match step {
                Ok(grad) if grad.is_finite() => {
                    if !apply_adam(&mut state.align_opt, &mut state.encoder, &grad) {
                        skipped.push(Stage::Alignment);
                        break;
                    }
                }
                Ok(_) => {
                    skipped.push(Stage::Alignment);
                    break;
                }
                Err(e) if is_blowup(&e) => {
                    log::warn!("alignment stage skipped: {e}");
                    skipped.push(Stage::Alignment);
                    break;
                }
                Err(e) => return Err(e),
            }
        }
    }
    state.tracker = committed;

    let v_aligned = state.encoder.forward(x)?.embeddings;
    let align_loss_after = match sym_eig(&ema_blend(&sigma_old, &v_aligned, cfg.alpha)?) {
        Ok(e) => chordal_loss(bt, &subspace_from_eig(&e, r)?)?,
        Err(e) if is_blowup(&e) => T::nan(),
        Err(e) => return Err(e),
    };

    // Steps 2 and 3: projection and the test-time objective.
    let mut tta_loss = T::nan();
    let mut no_signal_rows = 0;
    let mut single_cluster = false;
    for s in 0..cfg.tta_steps {
        let eval = tta_objective(&state.encoder, x, prior, cfg)?;
        if s == 0 {
            tta_loss = eval.loss;
        }
        no_signal_rows = eval.no_signal_rows;
        single_cluster = eval.single_cluster;
        if !(eval.loss.is_finite() && eval.grad.is_finite()) || !apply_adam(&mut state.tta_opt, &mut state.encoder, &eval.grad) {
            log::warn!("test-time objective stage skipped: non-finite gradient");
            skipped.push(Stage::Tta);
            break;
        }
    }

    // Step 4: predictions from the final encoder.
    let v_final = state.encoder.forward(x)?.embeddings;
    let head = head_features(&v_final, prior, cfg.project)?;
    let preds = zero_shot_rows(&head, &prior.anchors, cfg.temperature);
    let report = StepReport {
        step: 0,
        segment: 0,
        batch_len: x.rows(),
        align_loss_before,
        align_loss_after,
        tta_loss,
        batch_accuracy: accuracy(&preds, labels),
        mean_semantic_concentration: mean_concentration(&v_final, bt),
        subspace_principal_angles,
        dropped_gap_terms,
        degenerate_rows,
        no_signal_rows: no_signal_rows.max(preds.iter().filter(|p| p.no_signal).count()),
        single_cluster,
        skipped,
    };
    Ok((report, preds))
}

/// A named run of raw samples, e.g. one corruption type.
#[derive(Clone, Debug)]
pub struct Segment<T> {
    pub name: String,
    pub x: Matrix<T>,
    pub labels: Option<Vec<usize>>,
}

#[derive(Clone, Debug)]
pub struct RunSummary<T> {
    pub reports: Vec<StepReport<T>>,
    pub samples: usize,
    /// Zero-shot accuracy of the raw inputs, when every segment is labelled.
    pub source_accuracy: Option<T>,
    /// Accuracy of the online predictions over the whole stream.
    pub adapted_accuracy: Option<T>,
    /// Mean batch accuracy over the final [`SUMMARY_WINDOW`] batches.
    pub final_window_accuracy: Option<T>,
    pub align_first_window: T,
    pub align_last_window: T,
    pub skipped_stages: usize,
}

fn window_mean<T: Real>(values: impl Iterator<Item = T>) -> T {
    let vals: Vec<T> = values.collect();
    if vals.is_empty() {
        return T::nan();
    }
    vals.iter().copied().sum::<T>() / T::of_usize(vals.len())
}

/// Adapts batch by batch over every segment with a fixed text prior.
pub fn run_stream<T: Real>(
    segments: &[Segment<T>],
    prior: &TextPrior<T>,
    encoder: ToyEncoder<T>,
    cfg: &TtaConfig<T>,
) -> Result<RunSummary<T>> {
    cfg.validate(prior.dim())?;
    if prior.bt.rank() != cfg.rank {
        return Err(Error::Config(format!(
            "text subspace rank {} differs from configured rank {}",
            prior.bt.rank(),
            cfg.rank
        )));
    }
    let mut state = AdaptState::new(prior, encoder, cfg)?;
    let all_labelled = segments.iter().all(|s| s.labels.is_some());
    let mut reports = Vec::new();
    let mut samples = 0;
    let mut source_hits = 0;
    let mut adapted_hits = 0;

    for (seg_idx, seg) in segments.iter().enumerate() {
        if seg_idx > 0 && cfg.reset_between_segments {
            state.reset(prior);
        }
        if let Some(l) = &seg.labels {
            if l.len() != seg.x.rows() {
                return Err(Error::DimensionMismatch(format!(
                    "segment {}: {} labels for {} rows",
                    seg.name,
                    l.len(),
                    seg.x.rows()
                )));
            }
            if let Some(&bad) = l.iter().find(|&&y| y >= prior.anchors.num_classes()) {
                return Err(Error::DimensionMismatch(format!(
                    "segment {}: label {bad} for {} classes",
                    seg.name,
                    prior.anchors.num_classes()
                )));
            }
        }
        let mut start = 0;
        while start < seg.x.rows() {
            let end = (start + cfg.batch_size).min(seg.x.rows());
            let xb = seg.x.row_range(start, end);
            let yb = seg.labels.as_ref().map(|l| &l[start..end]);
            if let Some(y) = yb {
                let raw = zero_shot_rows(&xb, &prior.anchors, cfg.temperature);
                source_hits += raw.iter().zip(y).filter(|(p, &t)| p.class_index == t).count();
            }
            let (mut report, preds) = adapt_batch(&mut state, prior, &xb, yb, cfg)?;
            if let Some(y) = yb {
                adapted_hits += preds.iter().zip(y).filter(|(p, &t)| p.class_index == t).count();
            }
            report.step = reports.len();
            report.segment = seg_idx;
            reports.push(report);
            samples += end - start;
            start = end;
        }
    }

    let labelled = all_labelled && samples > 0;
    let frac = |hits: usize| T::of_usize(hits) / T::of_usize(samples);
    let n = reports.len();
    let tail = n.saturating_sub(SUMMARY_WINDOW);
    Ok(RunSummary {
        source_accuracy: labelled.then(|| frac(source_hits)),
        adapted_accuracy: labelled.then(|| frac(adapted_hits)),
        final_window_accuracy: labelled
            .then(|| window_mean(reports[tail..].iter().filter_map(|r| r.batch_accuracy))),
        align_first_window: window_mean(reports.iter().take(SUMMARY_WINDOW).map(|r| r.align_loss_before)),
        align_last_window: window_mean(reports[tail..].iter().map(|r| r.align_loss_before)),
        skipped_stages: reports.iter().map(|r| r.skipped.len()).sum(),
        samples,
        reports,
    })
}
