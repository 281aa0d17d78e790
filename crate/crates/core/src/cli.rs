//! Command-line front end. `run` returns the process exit code.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::adapt::{run_stream, Objective, RunSummary, Segment, TextPrior};
use crate::checks::{eig_checks, grad_checks, CheckResult};
use crate::encoder::ToyEncoder;
use crate::error::{Error, Result};
use crate::io::{
    atomic_write, read_embeddings, write_diagnose_csv, write_embeddings, write_step_csv, DiagnoseRow,
    EmbeddingFile, RunConfig, SourceSpec,
};
use crate::predictor::{diagnose, zero_shot, TextAnchorSet};
use crate::synth::{generate, SynthConfig};

#[derive(Debug, Parser)]
#[command(name = "subtta", version, about = "Test-time adaptation by subspace alignment and semantic projection")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic dataset as embedding files.
    SynthGen(SynthGenArgs),
    /// Run online adaptation over a stream and write per-step metrics.
    Adapt(AdaptArgs),
    /// Per-sample angle, concentration and similarity against the anchors.
    Diagnose(DiagnoseArgs),
    /// Compare every analytic gradient with finite differences.
    GradCheck(CheckArgs),
    /// Decomposition self-tests.
    EigCheck(CheckArgs),
}

#[derive(Debug, Args, Default)]
struct SynthArgs {
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    samples_per_class: Option<usize>,
    #[arg(long)]
    severity: Option<u32>,
    #[arg(long)]
    rotation_max_deg: Option<f64>,
    #[arg(long)]
    nuisance_max: Option<f64>,
    #[arg(long)]
    flip_fraction_max: Option<f64>,
    #[arg(long)]
    within_class_noise: Option<f64>,
}

impl SynthArgs {
    fn any(&self) -> bool {
        self.dim.is_some()
            || self.classes.is_some()
            || self.samples_per_class.is_some()
            || self.severity.is_some()
            || self.rotation_max_deg.is_some()
            || self.nuisance_max.is_some()
            || self.flip_fraction_max.is_some()
            || self.within_class_noise.is_some()
    }

    fn apply(&self, s: &mut SynthConfig) {
        macro_rules! over {
            ($($src:ident => $dst:ident),*) => {$(
                if let Some(v) = self.$src {
                    s.$dst = v;
                }
            )*};
        }
        over!(dim => d, classes => classes, samples_per_class => samples_per_class,
              severity => severity, rotation_max_deg => rotation_max_deg,
              nuisance_max => nuisance_max, flip_fraction_max => flip_fraction_max,
              within_class_noise => within_class_noise);
    }
}

#[derive(Debug, Args)]
struct SynthGenArgs {
    #[command(flatten)]
    synth: SynthArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output embedding file with labels.
    #[arg(long)]
    out_images: PathBuf,
    /// Output anchor file.
    #[arg(long)]
    out_anchors: PathBuf,
}

#[derive(Debug, Args)]
struct AdaptArgs {
    /// Start from a saved run.cfg; explicit flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Embedding file; repeat for several segments.
    #[arg(long)]
    images: Vec<PathBuf>,
    #[arg(long)]
    anchors: Option<PathBuf>,
    #[command(flatten)]
    synth: SynthArgs,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Optimizer steps per stage and batch.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, value_parser = ["entropy", "icv"])]
    objective: Option<String>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    no_align: bool,
    #[arg(long)]
    no_project: bool,
    #[arg(long)]
    reset_between_segments: bool,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
struct DiagnoseArgs {
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    anchors: PathBuf,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long, default_value_t = 0.01)]
    temperature: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct CheckArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

pub fn run(cli: Cli) -> ExitCode {
    let outcome = match cli.command {
        Command::SynthGen(a) => synth_gen(a).map(|_| true),
        Command::Adapt(a) => adapt(a).map(|_| true),
        Command::Diagnose(a) => diagnose_cmd(a).map(|_| true),
        Command::GradCheck(a) => grad_checks(a.seed).map(report_checks),
        Command::EigCheck(a) => eig_checks(a.seed).map(report_checks),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn report_checks(results: Vec<CheckResult>) -> bool {
    for r in &results {
        println!("{r}");
    }
    results.iter().all(CheckResult::passed)
}

fn synth_gen(a: SynthGenArgs) -> Result<()> {
    let mut cfg = SynthConfig {
        seed: a.seed,
        ..SynthConfig::default()
    };
    a.synth.apply(&mut cfg);
    let ds = generate::<f64>(&cfg)?;
    write_embeddings(&a.out_images, &EmbeddingFile::from_matrix(&ds.x, Some(&ds.labels))?)?;
    write_embeddings(&a.out_anchors, &EmbeddingFile::from_matrix(ds.anchors.matrix(), None)?)?;
    println!("wrote {} samples ({} classes, d={})", ds.labels.len(), cfg.classes, cfg.d);
    Ok(())
}

fn load_anchors(path: &Path) -> Result<TextAnchorSet<f64>> {
    let file = read_embeddings(path)?;
    TextAnchorSet::normalized(file.unit_rows(), Vec::new())
}

fn load_segment(path: &Path, anchors: &TextAnchorSet<f64>) -> Result<Segment<f64>> {
    let file = read_embeddings(path)?;
    if file.dim != anchors.dim() {
        return Err(Error::DimensionMismatch(format!(
            "{}: dim {} vs anchor dim {}",
            path.display(),
            file.dim,
            anchors.dim()
        )));
    }
    let labels = file.labels_usize();
    if let Some(&bad) = labels.iter().flatten().find(|&&y| y >= anchors.num_classes()) {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: format!("label {bad} but only {} anchors", anchors.num_classes()),
        });
    }
    Ok(Segment {
        name: path.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned()),
        x: file.unit_rows(),
        labels,
    })
}

fn resolve_config(a: &AdaptArgs) -> Result<RunConfig> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::synthetic_default(),
    };
    if !a.images.is_empty() || a.anchors.is_some() {
        if a.synth.any() {
            return Err(Error::Config("synthetic options cannot be combined with --images".into()));
        }
        let anchors = a
            .anchors
            .clone()
            .ok_or_else(|| Error::Config("--images requires --anchors".into()))?;
        if a.images.is_empty() {
            return Err(Error::Config("--anchors requires at least one --images".into()));
        }
        cfg.source = SourceSpec::Files {
            images: a.images.clone(),
            anchors,
        };
    }
    let t = &mut cfg.tta;
    if let Some(v) = a.rank {
        t.rank = v;
    } else if let SourceSpec::Synthetic(s) = &cfg.source {
        if a.synth.classes.is_some() && a.config.is_none() {
            t.rank = a.synth.classes.unwrap_or(s.classes).clamp(1, 64);
        }
    }
    if let Some(v) = a.alpha {
        t.alpha = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = a.lr {
        t.lr = v;
    }
    if let Some(v) = a.steps {
        t.align_steps = v;
        t.tta_steps = v;
    }
    if let Some(v) = &a.objective {
        t.objective = v.parse::<Objective>()?;
    }
    if let Some(v) = a.temperature {
        t.temperature = v;
    }
    if let Some(v) = a.seed {
        t.seed = v;
    }
    if a.no_align {
        t.align = false;
    }
    if a.no_project {
        t.project = false;
    }
    if a.reset_between_segments {
        t.reset_between_segments = true;
    }
    let seed = t.seed;
    if let SourceSpec::Synthetic(s) = &mut cfg.source {
        a.synth.apply(s);
        s.seed = seed;
    }
    Ok(cfg)
}

/// Builds the segments and the text prior described by a run config.
pub fn prepare(cfg: &RunConfig) -> Result<(Vec<Segment<f64>>, TextPrior<f64>)> {
    let (segments, anchors) = match &cfg.source {
        SourceSpec::Synthetic(s) => {
            let ds = generate::<f64>(s)?;
            let seg = Segment {
                name: "synthetic".into(),
                x: ds.x,
                labels: Some(ds.labels),
            };
            (vec![seg], ds.anchors)
        }
        SourceSpec::Files { images, anchors } => {
            let anchors = load_anchors(anchors)?;
            let segs = images
                .iter()
                .map(|p| load_segment(p, &anchors))
                .collect::<Result<Vec<_>>>()?;
            (segs, anchors)
        }
    };
    cfg.tta.validate(anchors.dim())?;
    let prior = TextPrior::new(anchors, cfg.tta.rank)?;
    Ok((segments, prior))
}

/// Runs a config end to end and writes `run.cfg`, `steps.csv` and `summary.txt`.
pub fn execute(cfg: &RunConfig, out_dir: &Path) -> Result<RunSummary<f64>> {
    let (segments, prior) = prepare(cfg)?;
    let summary = run_stream(&segments, &prior, ToyEncoder::new(prior.dim()), &cfg.tta)?;
    fs::create_dir_all(out_dir)?;
    cfg.save(&out_dir.join("run.cfg"))?;
    write_step_csv(&summary.reports, &out_dir.join("steps.csv"))?;
    atomic_write(&out_dir.join("summary.txt"), summary_text(&summary).as_bytes())?;
    Ok(summary)
}

pub fn summary_text(s: &RunSummary<f64>) -> String {
    let opt = |x: Option<f64>| x.map_or("nan".to_string(), |v| v.to_string());
    format!(
        "batches={}\nsamples={}\nsource_accuracy={}\nadapted_accuracy={}\nfinal_window_accuracy={}\nalign_loss_first_window={}\nalign_loss_last_window={}\nskipped_stages={}\n",
        s.reports.len(),
        s.samples,
        opt(s.source_accuracy),
        opt(s.adapted_accuracy),
        opt(s.final_window_accuracy),
        s.align_first_window,
        s.align_last_window,
        s.skipped_stages,
    )
}

fn adapt(a: AdaptArgs) -> Result<()> {
    let cfg = resolve_config(&a)?;
    let summary = execute(&cfg, &a.out_dir)?;
    print!("{}", summary_text(&summary));
    Ok(())
}

fn diagnose_cmd(a: DiagnoseArgs) -> Result<()> {
    let anchors = load_anchors(&a.anchors)?;
    let seg = load_segment(&a.images, &anchors)?;
    let rank = a.rank.unwrap_or(anchors.num_classes().clamp(1, 64));
    let prior = TextPrior::new(anchors, rank)?;
    let mut rows = Vec::with_capacity(seg.x.rows());
    let mut hits = 0;
    for (i, v) in seg.x.row_iter().enumerate() {
        let label = seg.labels.as_ref().map(|l| l[i]);
        let pred = zero_shot(v, &prior.anchors, a.temperature);
        let d = diagnose(v, &prior.bt, &prior.anchors, label.unwrap_or(0))?;
        if label == Some(pred.class_index) {
            hits += 1;
        }
        rows.push(DiagnoseRow {
            index: i,
            label,
            prediction: pred.class_index,
            score: pred.score,
            angle_to_text_subspace: d.angle_to_text_subspace,
            semantic_concentration: d.semantic_concentration,
            gt_similarity: label.map(|_| d.gt_similarity),
        });
    }
    write_diagnose_csv(&rows, &a.out)?;
    println!("samples={}", rows.len());
    if seg.labels.is_some() {
        println!("source_accuracy={}", hits as f64 / rows.len() as f64);
    }
    Ok(())
}
