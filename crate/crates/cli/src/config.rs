//! Flat `key = value` experiment configuration.
//!
//! One setting per line, `#` starts a comment, nested settings use dotted
//! keys such as `training.learning_rate`. Every key is optional; anything
//! missing keeps its default. Unknown or repeated keys are errors.
//!
//! ```text
//! seed = 0
//! seeds = 5
//! data.class_separation = 8
//! noise.p_noise = 0.4
//! refinement.tau = 0.8
//! correction.zeta = quantile:0.5
//! correction.noisy = above_mean
//! ```

use std::collections::BTreeSet;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use cpc_core::{
    ExtractorKind, HardDirection, NoiseSpec, NoisyPolicy, PipelineConfig,
    ScoreSource, SyntheticSpec, ZetaPolicy,
};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    /// Base master seed; repetition `k` runs with `seed + k`.
    pub seed: u64,
    /// Number of repetitions.
    pub seeds: usize,
    pub data: SyntheticSpec,
    pub noise: NoiseSpec,
    pub pipeline: PipelineConfig,
    /// Dataset files, relative to the directory holding the config file.
    pub source_path: PathBuf,
    pub target_path: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            seeds: 1,
            data: SyntheticSpec::default(),
            noise: NoiseSpec {
                p_noise: 0.4,
                seed: 100,
            },
            pipeline: PipelineConfig::default(),
            source_path: PathBuf::from("source.emb"),
            target_path: PathBuf::from("target.emb"),
            out_dir: PathBuf::from("out"),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| CliError::Config(format!("{key}: cannot parse {value:?}: {e}")))
}

fn parse_zeta(key: &str, value: &str) -> Result<ZetaPolicy> {
    match value.split_once(':') {
        Some(("quantile", q)) => Ok(ZetaPolicy::Quantile(parse(key, q)?)),
        Some(("absolute", z)) => Ok(ZetaPolicy::Absolute(parse(key, z)?)),
        _ => Err(CliError::Config(format!(
            "{key}: expected quantile:<q> or absolute:<z>, got {value:?}"
        ))),
    }
}

fn parse_noisy(key: &str, value: &str) -> Result<NoisyPolicy> {
    match value.split_once(':') {
        None if value == "above_mean" => Ok(NoisyPolicy::AboveClassMean),
        Some(("top_fraction", r)) => Ok(NoisyPolicy::TopFraction(parse(key, r)?)),
        _ => Err(CliError::Config(format!(
            "{key}: expected above_mean or top_fraction:<rho>, got {value:?}"
        ))),
    }
}

fn zeta_text(z: ZetaPolicy) -> String {
    match z {
        ZetaPolicy::Quantile(q) => format!("quantile:{q}"),
        ZetaPolicy::Absolute(v) => format!("absolute:{v}"),
    }
}

fn noisy_text(n: NoisyPolicy) -> String {
    match n {
        NoisyPolicy::AboveClassMean => "above_mean".into(),
        NoisyPolicy::TopFraction(r) => format!("top_fraction:{r}"),
    }
}

impl ExperimentConfig {
    /// Reads and validates a config file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::parse_text(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut seen = BTreeSet::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split_once('#').map_or(raw, |(before, _)| before).trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CliError::Config(format!("line {}: expected `key = value`, got {line:?}", no + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(CliError::Config(format!("line {}: duplicate key {key}", no + 1)));
            }
            cfg.set(key, value)
                .map_err(|e| CliError::Config(format!("line {}: {}", no + 1, strip(e))))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies one setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let p = &mut self.pipeline;
        match key {
            "seed" => self.seed = parse(key, value)?,
            "seeds" => self.seeds = parse(key, value)?,
            "out" => self.out_dir = PathBuf::from(value),
            "paths.source" => self.source_path = PathBuf::from(value),
            "paths.target" => self.target_path = PathBuf::from(value),

            "data.num_classes" => self.data.num_classes = parse(key, value)?,
            "data.dim" => self.data.dim = parse(key, value)?,
            "data.samples_per_class_source" => self.data.samples_per_class_source = parse(key, value)?,
            "data.samples_per_class_target" => self.data.samples_per_class_target = parse(key, value)?,
            "data.class_separation" => self.data.class_separation = parse(key, value)?,
            "data.domain_shift" => self.data.domain_shift = parse(key, value)?,
            "data.confusable_pair_gap" => self.data.confusable_pair_gap = parse(key, value)?,
            "data.seed" => self.data.seed = parse(key, value)?,

            "noise.p_noise" => self.noise.p_noise = parse(key, value)?,
            "noise.seed" => self.noise.seed = parse(key, value)?,

            "correction_epochs" => p.correction_epochs = parse(key, value)?,
            "train_epochs" => p.train_epochs = parse(key, value)?,
            "enable_correction" => p.enable_correction = parse(key, value)?,
            "refine_source_first" => p.refine_source_first = parse(key, value)?,
            "scores" => {
                p.scores = match value {
                    "logits" => ScoreSource::Logits,
                    "prototypes" => ScoreSource::Prototypes,
                    _ => return Err(CliError::Config(format!("{key}: expected logits or prototypes"))),
                }
            }

            "refinement.tau" => p.refinement.tau = parse(key, value)?,
            "refinement.refine_iters" => p.refinement.refine_iters = parse(key, value)?,
            "refinement.enable_trim" => p.refinement.enable_trim = parse(key, value)?,
            "refinement.trim_source" => p.refinement.trim_source = parse(key, value)?,
            "refinement.reinit_every_iter" => p.refinement.reinit_every_iter = parse(key, value)?,

            "training.learning_rate" => p.training.learning_rate = parse(key, value)?,
            "training.batch_size" => p.training.batch_size = parse(key, value)?,
            "training.weight_decay" => p.training.weight_decay = parse(key, value)?,
            "training.seed" => p.training.seed = parse(key, value)?,

            "correction.zeta" => p.correction.zeta = parse_zeta(key, value)?,
            "correction.noisy" => p.correction.noisy = parse_noisy(key, value)?,
            "correction.hard" => {
                p.correction.direction = match value {
                    "above" => HardDirection::Above,
                    "at_or_below" => HardDirection::AtOrBelow,
                    _ => return Err(CliError::Config(format!("{key}: expected above or at_or_below"))),
                }
            }

            "extractor" => {
                p.extractor = match value {
                    "identity" => ExtractorKind::Identity,
                    "mlp" => match p.extractor {
                        ExtractorKind::Mlp { .. } => p.extractor,
                        ExtractorKind::Identity => ExtractorKind::default(),
                    },
                    _ => return Err(CliError::Config(format!("{key}: expected identity or mlp"))),
                }
            }
            "extractor.hidden" | "extractor.embed_dim" => {
                let v: usize = parse(key, value)?;
                let ExtractorKind::Mlp { hidden, embed_dim } = &mut p.extractor else {
                    return Err(CliError::Config(format!(
                        "{key} needs `extractor = mlp` on an earlier line"
                    )));
                };
                if key == "extractor.hidden" {
                    *hidden = v;
                } else {
                    *embed_dim = v;
                }
            }
            _ => return Err(CliError::Config(format!("unknown key {key}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds == 0 {
            return Err(CliError::Config("seeds must be at least 1".into()));
        }
        self.data.validate().map_err(CliError::from)?;
        self.noise.validate().map_err(CliError::from)?;
        self.pipeline.validate().map_err(CliError::from)?;
        Ok(())
    }

    /// Every setting as `(key, value)` in file order. Parsing the joined
    /// lines gives back an equal config.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let p = &self.pipeline;
        let d = &self.data;
        let mut out = vec![
            ("seed", self.seed.to_string()),
            ("seeds", self.seeds.to_string()),
            ("out", self.out_dir.display().to_string()),
            ("paths.source", self.source_path.display().to_string()),
            ("paths.target", self.target_path.display().to_string()),
            ("data.num_classes", d.num_classes.to_string()),
            ("data.dim", d.dim.to_string()),
            ("data.samples_per_class_source", d.samples_per_class_source.to_string()),
            ("data.samples_per_class_target", d.samples_per_class_target.to_string()),
            ("data.class_separation", d.class_separation.to_string()),
            ("data.domain_shift", d.domain_shift.to_string()),
            ("data.confusable_pair_gap", d.confusable_pair_gap.to_string()),
            ("data.seed", d.seed.to_string()),
            ("noise.p_noise", self.noise.p_noise.to_string()),
            ("noise.seed", self.noise.seed.to_string()),
            ("correction_epochs", p.correction_epochs.to_string()),
            ("train_epochs", p.train_epochs.to_string()),
            ("enable_correction", p.enable_correction.to_string()),
            ("refine_source_first", p.refine_source_first.to_string()),
            (
                "scores",
                match p.scores {
                    ScoreSource::Logits => "logits",
                    ScoreSource::Prototypes => "prototypes",
                }
                .into(),
            ),
            ("refinement.tau", p.refinement.tau.to_string()),
            ("refinement.refine_iters", p.refinement.refine_iters.to_string()),
            ("refinement.enable_trim", p.refinement.enable_trim.to_string()),
            ("refinement.trim_source", p.refinement.trim_source.to_string()),
            ("refinement.reinit_every_iter", p.refinement.reinit_every_iter.to_string()),
            ("training.learning_rate", p.training.learning_rate.to_string()),
            ("training.batch_size", p.training.batch_size.to_string()),
            ("training.weight_decay", p.training.weight_decay.to_string()),
            ("training.seed", p.training.seed.to_string()),
            ("correction.zeta", zeta_text(p.correction.zeta)),
            ("correction.noisy", noisy_text(p.correction.noisy)),
            (
                "correction.hard",
                match p.correction.direction {
                    HardDirection::Above => "above",
                    HardDirection::AtOrBelow => "at_or_below",
                }
                .into(),
            ),
        ];
        match p.extractor {
            ExtractorKind::Identity => out.push(("extractor", "identity".into())),
            ExtractorKind::Mlp { hidden, embed_dim } => {
                out.push(("extractor", "mlp".into()));
                out.push(("extractor.hidden", hidden.to_string()));
                out.push(("extractor.embed_dim", embed_dim.to_string()));
            }
        }
        out
    }

    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Pipeline settings for repetition `k`.
    pub fn pipeline_for(&self, k: usize) -> PipelineConfig {
        PipelineConfig {
            master_seed: self.seed.wrapping_add(k as u64),
            ..self.pipeline.clone()
        }
    }
}

fn strip(e: CliError) -> String {
    match e {
        CliError::Config(m) | CliError::Data(m) | CliError::Runtime(m) => m,
    }
}

/// Ablation presets selectable from the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, clap::ValueEnum)]
pub enum Ablation {
    /// Full method as configured.
    #[default]
    None,
    /// Refinement only, correction disabled.
    TrOnly,
    /// Refinement only, without trimming.
    TrNotrim,
}

impl Ablation {
    pub fn apply(self, p: &mut PipelineConfig) {
        match self {
            Ablation::None => {}
            Ablation::TrOnly => p.enable_correction = false,
            Ablation::TrNotrim => {
                p.enable_correction = false;
                p.refinement.enable_trim = false;
            }
        }
    }
}
