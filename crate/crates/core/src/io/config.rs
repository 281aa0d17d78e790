//! Flat `key=value` run configuration, echoed into every output directory.
//!
//! Floats are written with Rust's shortest round-trip formatting, so parsing
//! the echo gives back the exact values.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::adapt::{Objective, TtaConfig};
use crate::error::{Error, Result};
use crate::synth::SynthConfig;

#[derive(Clone, Debug, PartialEq)]
pub enum SourceSpec {
    Synthetic(SynthConfig),
    Files { images: Vec<PathBuf>, anchors: PathBuf },
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub tta: TtaConfig<f64>,
    pub source: SourceSpec,
}

impl RunConfig {
    /// Synthetic defaults: a severity-5 stream of 50 batches of 64.
    pub fn synthetic_default() -> Self {
        let synth = SynthConfig::default();
        Self {
            tta: TtaConfig::for_classes(synth.classes),
            source: SourceSpec::Synthetic(synth),
        }
    }

    pub fn to_text(&self) -> String {
        let t = &self.tta;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k}={v}");
        };
        kv("rank", t.rank.to_string());
        kv("alpha", t.alpha.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("lr", t.lr.to_string());
        kv("align_steps", t.align_steps.to_string());
        kv("tta_steps", t.tta_steps.to_string());
        kv("objective", t.objective.to_string());
        kv("temperature", t.temperature.to_string());
        kv("seed", t.seed.to_string());
        kv("align", t.align.to_string());
        kv("project", t.project.to_string());
        kv("reset_between_segments", t.reset_between_segments.to_string());
        match &self.source {
            SourceSpec::Synthetic(s) => {
                kv("source", "synthetic".into());
                kv("synth.d", s.d.to_string());
                kv("synth.classes", s.classes.to_string());
                kv("synth.samples_per_class", s.samples_per_class.to_string());
                kv("synth.severity", s.severity.to_string());
                kv("synth.rotation_max_deg", s.rotation_max_deg.to_string());
                kv("synth.nuisance_max", s.nuisance_max.to_string());
                kv("synth.flip_fraction_max", s.flip_fraction_max.to_string());
                kv("synth.within_class_noise", s.within_class_noise.to_string());
            }
            SourceSpec::Files { images, anchors } => {
                kv("source", "files".into());
                kv("anchors", anchors.display().to_string());
                for p in images {
                    kv("images", p.display().to_string());
                }
            }
        }
        out
    }

    /// Parses the echo format. Blank lines and `#` comments are ignored; keys
    /// not present keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut tta = TtaConfig::<f64>::for_classes(SynthConfig::default().classes);
        let mut synth = SynthConfig::default();
        let mut source = None::<String>;
        let mut images = Vec::new();
        let mut anchors = None;
        let mut rank_given = false;

        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |e: &dyn std::fmt::Display| Error::Config(format!("line {}: {key}: {e}", lineno + 1));
            macro_rules! set {
                ($field:expr) => {
                    $field = value.parse().map_err(|e| bad(&e))?
                };
            }
            match key {
                "rank" => {
                    set!(tta.rank);
                    rank_given = true;
                }
                "alpha" => set!(tta.alpha),
                "batch_size" => set!(tta.batch_size),
                "lr" => set!(tta.lr),
                "align_steps" => set!(tta.align_steps),
                "tta_steps" => set!(tta.tta_steps),
                "objective" => tta.objective = value.parse::<Objective>()?,
                "temperature" => set!(tta.temperature),
                "seed" => set!(tta.seed),
                "align" => set!(tta.align),
                "project" => set!(tta.project),
                "reset_between_segments" => set!(tta.reset_between_segments),
                "source" => source = Some(value.to_string()),
                "synth.d" => set!(synth.d),
                "synth.classes" => set!(synth.classes),
                "synth.samples_per_class" => set!(synth.samples_per_class),
                "synth.severity" => set!(synth.severity),
                "synth.rotation_max_deg" => set!(synth.rotation_max_deg),
                "synth.nuisance_max" => set!(synth.nuisance_max),
                "synth.flip_fraction_max" => set!(synth.flip_fraction_max),
                "synth.within_class_noise" => set!(synth.within_class_noise),
                "anchors" => anchors = Some(PathBuf::from(value)),
                "images" => images.push(PathBuf::from(value)),
                other => return Err(Error::Config(format!("line {}: unknown key {other:?}", lineno + 1))),
            }
        }

        synth.seed = tta.seed;
        let source = match source.as_deref() {
            None | Some("synthetic") => {
                if !rank_given {
                    tta.rank = synth.classes.clamp(1, 64);
                }
                SourceSpec::Synthetic(synth)
            }
            Some("files") => SourceSpec::Files {
                anchors: anchors.ok_or_else(|| Error::Config("files source needs anchors".into()))?,
                images,
            },
            Some(other) => return Err(Error::Config(format!("unknown source {other:?}"))),
        };
        Ok(Self { tta, source })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        super::atomic_write(path, self.to_text().as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_round_trip() {
        let mut cfg = RunConfig::synthetic_default();
        cfg.tta.alpha = 0.1 + 0.2;
        cfg.tta.lr = 1.0 / 3.0;
        cfg.tta.objective = Objective::InterClassVariance;
        cfg.tta.seed = 42;
        if let SourceSpec::Synthetic(s) = &mut cfg.source {
            s.seed = 42;
            s.nuisance_max = std::f64::consts::PI;
        }
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn files_round_trip() {
        let mut cfg = RunConfig::synthetic_default();
        cfg.source = SourceSpec::Files {
            images: vec!["a.seb".into(), "b.seb".into()],
            anchors: "t.seb".into(),
        };
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(RunConfig::parse("rank=3\nwarp=9\n").is_err());
        assert!(RunConfig::parse("rank=three\n").is_err());
    }
}
