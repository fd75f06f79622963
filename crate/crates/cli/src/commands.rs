use std::fs;
use std::path::{Path, PathBuf};

use cpc_core::data::truth_path;
use cpc_core::{
    generate_synthetic_pair, inject_symmetric_noise, load_dataset, load_truth, save_dataset,
    save_truth, EmbeddingDataset, RunInputs, RunMetrics,
};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{Ablation, ExperimentConfig};
use crate::error::{CliError, Result};
use crate::stats::{mean_std, MeanStd};

pub fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| CliError::Runtime(format!("writing {}: {e}", path.display())))
}

pub fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path)
        .map_err(|e| CliError::Runtime(format!("creating {}: {e}", path.display())))
}

/// Directory relative paths in a config file are resolved against.
fn base_dir(config_path: &Path) -> PathBuf {
    config_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default()
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

#[derive(Debug, Clone, Default)]
pub struct GenerateArgs {
    pub config: PathBuf,
    /// Output directory; the config's dataset paths are used when absent.
    pub out: Option<PathBuf>,
    /// Replaces `data.seed`, and `noise.seed` with `seed + 100`.
    pub seed: Option<u64>,
}

/// Files written by [`generate`].
#[derive(Debug, Clone)]
pub struct Generated {
    pub source: PathBuf,
    pub target: PathBuf,
}

/// Writes the synthetic source (noisy labels) and target (unlabelled) files
/// plus their truth sidecars.
pub fn generate(args: &GenerateArgs) -> Result<Generated> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.data.seed = seed;
        cfg.noise.seed = seed.wrapping_add(100);
    }
    cfg.validate()?;
    let (source, target) = match &args.out {
        Some(dir) => {
            create_dir(dir)?;
            let name = |p: &Path, fallback: &str| {
                dir.join(p.file_name().map_or_else(|| fallback.into(), PathBuf::from))
            };
            (name(&cfg.source_path, "source.emb"), name(&cfg.target_path, "target.emb"))
        }
        None => {
            let base = base_dir(&args.config);
            (resolve(&base, &cfg.source_path), resolve(&base, &cfg.target_path))
        }
    };
    for p in [&source, &target] {
        if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            create_dir(parent)?;
        }
    }

    let pair = generate_synthetic_pair(&cfg.data)?;
    let noisy = inject_symmetric_noise(&pair.source, &cfg.noise)?;
    save_dataset(&noisy, &source)?;
    save_truth(pair.source.require_labels()?, &truth_path(&source))?;
    save_dataset(&pair.target.unlabeled(), &target)?;
    save_truth(pair.target.require_labels()?, &truth_path(&target))?;
    Ok(Generated { source, target })
}

#[derive(Debug, Clone, Default)]
pub struct RunArgs {
    pub config: PathBuf,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub ablation: Ablation,
    pub refine_source_first: bool,
    pub reinit_proto_every_iter: bool,
    pub trim_source: Option<bool>,
    /// Worker threads for the seed pool, 0 for one per core.
    pub threads: usize,
}

/// Reads `CPC_THREADS`, defaulting to 0.
pub fn threads_from_env() -> Result<usize> {
    match std::env::var("CPC_THREADS") {
        Ok(v) if !v.trim().is_empty() => v
            .trim()
            .parse()
            .map_err(|_| CliError::Config(format!("CPC_THREADS must be a non-negative integer, got {v:?}"))),
        _ => Ok(0),
    }
}

struct Loaded {
    source: EmbeddingDataset,
    target: EmbeddingDataset,
    source_truth: Option<Vec<usize>>,
    target_truth: Option<Vec<usize>>,
}

fn optional_truth(data: &Path, ds: &EmbeddingDataset) -> Result<Option<Vec<usize>>> {
    let p = truth_path(data);
    if p.exists() {
        Ok(Some(load_truth(&p, ds.len(), ds.num_classes())?))
    } else {
        Ok(None)
    }
}

fn load_inputs(source: &Path, target: &Path) -> Result<Loaded> {
    let source_ds = load_dataset(source)?;
    source_ds
        .require_labels()
        .map_err(|_| CliError::Data(format!("{}: source file must be labelled", source.display())))?;
    let target_ds = load_dataset(target)?;
    if source_ds.dim() != target_ds.dim() || source_ds.num_classes() != target_ds.num_classes() {
        return Err(CliError::Data(format!(
            "{} has D={} C={} but {} has D={} C={}",
            source.display(),
            source_ds.dim(),
            source_ds.num_classes(),
            target.display(),
            target_ds.dim(),
            target_ds.num_classes()
        )));
    }
    Ok(Loaded {
        source_truth: optional_truth(source, &source_ds)?,
        target_truth: optional_truth(target, &target_ds)?,
        source: source_ds,
        target: target_ds,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct SeedSummary {
    pub index: usize,
    pub master_seed: u64,
    pub accuracy: Option<f64>,
    pub source_noise_rate: Option<f64>,
    pub source_noise_rate_refined: Option<f64>,
    pub num_corrections: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct Aggregate {
    pub seeds: Vec<SeedSummary>,
    pub accuracy: Option<MeanStd>,
    pub per_class_accuracy: Vec<Option<MeanStd>>,
}

impl Aggregate {
    pub fn from_runs(runs: &[(u64, RunMetrics)], num_classes: usize) -> Self {
        let seeds = runs
            .iter()
            .enumerate()
            .map(|(index, (master_seed, m))| SeedSummary {
                index,
                master_seed: *master_seed,
                accuracy: m.final_accuracy(),
                source_noise_rate: m.source_noise_rate,
                source_noise_rate_refined: m.source_noise_rate_refined,
                num_corrections: m.corrections.iter().filter(|c| c.pair.is_some()).count(),
            })
            .collect();
        let evals: Vec<_> = runs.iter().filter_map(|(_, m)| m.final_evaluation.as_ref()).collect();
        let acc: Vec<f64> = evals.iter().map(|e| e.accuracy).collect();
        let per_class_accuracy = (0..num_classes)
            .map(|k| {
                let v: Vec<f64> = evals
                    .iter()
                    .filter_map(|e| e.per_class_accuracy.get(k).copied().flatten())
                    .collect();
                mean_std(&v)
            })
            .collect();
        Aggregate {
            seeds,
            accuracy: mean_std(&acc),
            per_class_accuracy,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("aggregate serialises")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,n,mean,std\n");
        let mut row = |name: String, m: &Option<MeanStd>| match m {
            Some(m) => out.push_str(&format!("{name},{},{:.6},{:.6}\n", m.n, m.mean, m.std)),
            None => out.push_str(&format!("{name},0,,\n")),
        };
        row("accuracy".into(), &self.accuracy);
        for (k, m) in self.per_class_accuracy.iter().enumerate() {
            row(format!("class_{k}_accuracy"), m);
        }
        out
    }
}

#[derive(Debug, Serialize)]
struct TimingsFile<'a> {
    total_seconds: f64,
    stages: &'a [cpc_core::pipeline::StageTiming],
}

/// Runs every repetition and writes per-seed metrics plus the aggregate.
/// Returns the output directory.
pub fn run(args: &RunArgs) -> Result<PathBuf> {
    let config_text = fs::read_to_string(&args.config)
        .map_err(|e| CliError::Config(format!("{}: {e}", args.config.display())))?;
    let mut cfg = ExperimentConfig::load(&args.config)?;
    let base = base_dir(&args.config);
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    args.ablation.apply(&mut cfg.pipeline);
    if args.refine_source_first {
        cfg.pipeline.refine_source_first = true;
    }
    if args.reinit_proto_every_iter {
        cfg.pipeline.refinement.reinit_every_iter = true;
    }
    if let Some(t) = args.trim_source {
        cfg.pipeline.refinement.trim_source = t;
    }
    cfg.validate()?;
    let out = match &args.out {
        Some(o) => o.clone(),
        None => resolve(&base, &cfg.out_dir),
    };

    let data = load_inputs(
        &resolve(&base, &cfg.source_path),
        &resolve(&base, &cfg.target_path),
    )?;
    let num_classes = data.source.num_classes();
    let inputs = RunInputs {
        source: data.source.features(),
        source_labels: data.source.require_labels()?,
        target: data.target.features(),
        num_classes,
        target_truth: data.target_truth.as_deref(),
        source_truth: data.source_truth.as_deref(),
    };

    create_dir(&out)?;
    write_file(&out.join("config.txt"), &config_text)?;
    write_file(&out.join("effective_config.txt"), cfg.to_text())?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.threads)
        .build()
        .map_err(|e| CliError::Runtime(format!("thread pool: {e}")))?;
    let results: Vec<Result<(u64, RunMetrics)>> = pool.install(|| {
        (0..cfg.seeds)
            .into_par_iter()
            .map(|k| {
                let pc = cfg.pipeline_for(k);
                let start = std::time::Instant::now();
                let (_, metrics) = cpc_core::run(&inputs, &pc)
                    .map_err(|e| match CliError::from(e) {
                        CliError::Runtime(m) => CliError::Runtime(format!("seed {k}: {m}")),
                        other => other,
                    })?;
                let dir = out.join(format!("seed_{k}"));
                create_dir(&dir)?;
                write_file(&dir.join("metrics.json"), metrics.to_json())?;
                write_file(&dir.join("metrics.csv"), metrics.to_csv(num_classes))?;
                write_file(&dir.join("corrections.jsonl"), metrics.corrections_jsonl())?;
                let timings = TimingsFile {
                    total_seconds: start.elapsed().as_secs_f64(),
                    stages: &metrics.timings,
                };
                write_file(
                    &dir.join("timings.json"),
                    serde_json::to_string_pretty(&timings).expect("timings serialise"),
                )?;
                Ok((pc.master_seed, metrics))
            })
            .collect()
    });
    let runs = results.into_iter().collect::<Result<Vec<_>>>()?;

    let agg = Aggregate::from_runs(&runs, num_classes);
    write_file(&out.join("aggregate.json"), agg.to_json())?;
    write_file(&out.join("aggregate.csv"), agg.to_csv())?;
    Ok(out)
}
