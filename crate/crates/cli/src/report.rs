//! Cross-variant summaries of finished runs.
//!
//! Each input is one variant: either a run directory, whose
//! `seed_*/metrics.json` files are its repetitions, or a single
//! `metrics.json` file.

use std::fs;
use std::path::{Path, PathBuf};

use cpc_core::pipeline::StageRecord;
use cpc_core::RunMetrics;

use crate::commands::{create_dir, write_file};
use crate::error::{CliError, Result};
use crate::stats::{mean_std, MeanStd};

#[derive(Debug, Clone)]
pub struct Variant {
    pub name: String,
    pub runs: Vec<RunMetrics>,
}

fn read_metrics(path: &Path) -> Result<RunMetrics> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("reading {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Data(format!("{}: not a metrics file: {e}", path.display())))
}

fn seed_index(name: &str) -> Option<usize> {
    name.strip_prefix("seed_")?.parse().ok()
}

/// Metrics files belonging to one variant, in seed order.
pub fn metrics_files(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let entries = fs::read_dir(path)
        .map_err(|e| CliError::Data(format!("reading {}: {e}", path.display())))?;
    let mut seeds = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| CliError::Data(format!("reading {}: {e}", path.display())))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(k) = seed_index(&name) {
            let m = entry.path().join("metrics.json");
            if m.is_file() {
                seeds.push((k, m));
            }
        }
    }
    if seeds.is_empty() {
        let direct = path.join("metrics.json");
        if direct.is_file() {
            return Ok(vec![direct]);
        }
        return Err(CliError::Data(format!("{}: no metrics files found", path.display())));
    }
    seeds.sort();
    Ok(seeds.into_iter().map(|(_, p)| p).collect())
}

pub fn load_variant(path: &Path) -> Result<Variant> {
    let runs = metrics_files(path)?
        .iter()
        .map(|p| read_metrics(p))
        .collect::<Result<Vec<_>>>()?;
    let name = path
        .components()
        .filter_map(|c| match c {
            std::path::Component::Normal(s) => Some(s.to_string_lossy().into_owned()),
            _ => None,
        })
        .rfind(|s| s != "metrics.json")
        .unwrap_or_else(|| path.display().to_string());
    Ok(Variant { name, runs })
}

/// Final accuracy over the repetitions of one variant.
#[derive(Debug, Clone)]
pub struct VariantSummary {
    pub name: String,
    pub runs: usize,
    pub accuracy: Option<MeanStd>,
    pub per_class: Vec<Option<MeanStd>>,
}

/// Mean per-class accuracy at one stage of the schedule.
#[derive(Debug, Clone)]
pub struct TrajectoryPoint {
    pub variant: String,
    pub step: usize,
    pub stage: &'static str,
    pub s: usize,
    pub e: Option<usize>,
    pub accuracy: Option<MeanStd>,
    pub per_class: Vec<Option<MeanStd>>,
}

#[derive(Debug, Clone)]
pub struct Report {
    pub num_classes: usize,
    pub variants: Vec<VariantSummary>,
    pub trajectory: Vec<TrajectoryPoint>,
}

fn class_stats(rows: &[&Vec<Option<f64>>], num_classes: usize) -> Vec<Option<MeanStd>> {
    (0..num_classes)
        .map(|k| {
            let v: Vec<f64> = rows.iter().filter_map(|r| r.get(k).copied().flatten()).collect();
            mean_std(&v)
        })
        .collect()
}

struct StageView<'a> {
    kind: &'static str,
    s: usize,
    e: Option<usize>,
    accuracy: Option<f64>,
    per_class: Option<&'a Vec<Option<f64>>>,
}

fn stage_view(r: &StageRecord) -> StageView<'_> {
    match r {
        StageRecord::Train(t) => StageView {
            kind: "train",
            s: t.s,
            e: Some(t.e),
            accuracy: t.classifier_accuracy,
            per_class: t.per_class_accuracy.as_ref(),
        },
        StageRecord::Correction(c) => StageView {
            kind: "correction",
            s: c.s,
            e: None,
            accuracy: c.classifier_accuracy,
            per_class: c.per_class_accuracy.as_ref(),
        },
    }
}

impl Report {
    pub fn build(variants: &[Variant]) -> Result<Self> {
        if variants.iter().all(|v| v.runs.is_empty()) {
            return Err(CliError::Data("no metrics files to report on".into()));
        }
        let num_classes = variants
            .iter()
            .flat_map(|v| &v.runs)
            .filter_map(|m| m.final_evaluation.as_ref().map(|e| e.per_class_accuracy.len()))
            .chain(variants.iter().flat_map(|v| &v.runs).flat_map(|m| {
                m.stages.iter().filter_map(|s| stage_view(s).per_class.map(Vec::len))
            }))
            .max()
            .unwrap_or(0);

        let mut summaries = Vec::new();
        let mut trajectory = Vec::new();
        for v in variants {
            let evals: Vec<_> = v.runs.iter().filter_map(|m| m.final_evaluation.as_ref()).collect();
            let acc: Vec<f64> = evals.iter().map(|e| e.accuracy).collect();
            let rows: Vec<_> = evals.iter().map(|e| &e.per_class_accuracy).collect();
            summaries.push(VariantSummary {
                name: v.name.clone(),
                runs: v.runs.len(),
                accuracy: mean_std(&acc),
                per_class: class_stats(&rows, num_classes),
            });

            let steps = v.runs.iter().map(|m| m.stages.len()).max().unwrap_or(0);
            for step in 0..steps {
                let here: Vec<_> = v.runs.iter().filter_map(|m| m.stages.get(step)).map(stage_view).collect();
                let acc: Vec<f64> = here.iter().filter_map(|h| h.accuracy).collect();
                let rows: Vec<_> = here.iter().filter_map(|h| h.per_class).collect();
                trajectory.push(TrajectoryPoint {
                    variant: v.name.clone(),
                    step,
                    stage: here[0].kind,
                    s: here[0].s,
                    e: here[0].e,
                    accuracy: mean_std(&acc),
                    per_class: class_stats(&rows, num_classes),
                });
            }
        }
        Ok(Report {
            num_classes,
            variants: summaries,
            trajectory,
        })
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from("variant,runs,accuracy_mean,accuracy_std");
        for k in 0..self.num_classes {
            out.push_str(&format!(",class_{k}_mean,class_{k}_std"));
        }
        out.push('\n');
        for v in &self.variants {
            out.push_str(&format!("{},{}{}", v.name, v.runs, cells(&v.accuracy)));
            for m in &v.per_class {
                out.push_str(&cells(m));
            }
            out.push('\n');
        }
        out
    }

    pub fn trajectory_csv(&self) -> String {
        let mut out = String::from("variant,step,stage,s,e,accuracy_mean,accuracy_std");
        for k in 0..self.num_classes {
            out.push_str(&format!(",class_{k}_mean"));
        }
        out.push('\n');
        for p in &self.trajectory {
            out.push_str(&format!(
                "{},{},{},{},{}{}",
                p.variant,
                p.step,
                p.stage,
                p.s,
                p.e.map_or(String::new(), |e| e.to_string()),
                cells(&p.accuracy)
            ));
            for m in &p.per_class {
                out.push(',');
                if let Some(m) = m {
                    out.push_str(&format!("{:.6}", m.mean));
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn summary_text(&self) -> String {
        let width = self.variants.iter().map(|v| v.name.len()).max().unwrap_or(0).max(7);
        let mut out = format!("{:<width$}  {:>4}  {:>18}", "variant", "runs", "accuracy (%)");
        for k in 0..self.num_classes {
            out.push_str(&format!("  {:>14}", format!("class {k}")));
        }
        out.push('\n');
        let pct = |m: &Option<MeanStd>| match m {
            Some(m) => format!("{:.2} +/- {:.2}", 100.0 * m.mean, 100.0 * m.std),
            None => "-".into(),
        };
        for v in &self.variants {
            out.push_str(&format!("{:<width$}  {:>4}  {:>18}", v.name, v.runs, pct(&v.accuracy)));
            for m in &v.per_class {
                out.push_str(&format!("  {:>14}", pct(m)));
            }
            out.push('\n');
        }
        out
    }

    /// Writes `summary.txt`, `summary.csv` and `trajectory.csv`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        create_dir(dir)?;
        write_file(&dir.join("summary.txt"), self.summary_text())?;
        write_file(&dir.join("summary.csv"), self.summary_csv())?;
        write_file(&dir.join("trajectory.csv"), self.trajectory_csv())
    }
}

fn cells(m: &Option<MeanStd>) -> String {
    match m {
        Some(m) => format!(",{:.6},{:.6}", m.mean, m.std),
        None => ",,".into(),
    }
}
