//! The full schedule: `S` correction epochs, each running `E` train epochs
//! (every one preceded by `M` refinement iterations) and then one round of
//! confusing-pair correction.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::correction::{
    correct_pair, hard_class_set, pair_frequency, select_most_confusing_pair, top_two,
    CorrectionConfig, CorrectionRecord, CorrectionReport,
};
use crate::data::{check_labels, noise_rate};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{ExtractorKind, Model, ModelSpec, TrainConfig};
use crate::prototype::{
    refine_source_labels, refine_target_from, PrototypeBank, RefineStart, RefinementConfig,
};
use crate::rng::derive_seed;

/// Scores ranked for the top-two statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreSource {
    /// Classifier head logits.
    #[default]
    Logits,
    /// Cosine similarity to the shared prototypes.
    Prototypes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// `S`
    pub correction_epochs: usize,
    /// `E`
    pub train_epochs: usize,
    /// `M` lives in `refinement.refine_iters`, the ablation switches for
    /// trimming in `refinement` as well.
    pub refinement: RefinementConfig,
    pub training: TrainConfig,
    pub correction: CorrectionConfig,
    pub extractor: ExtractorKind,
    pub enable_correction: bool,
    /// Relabel the source with its own prototypes once before training.
    pub refine_source_first: bool,
    pub scores: ScoreSource,
    pub master_seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            correction_epochs: 8,
            train_epochs: 3,
            refinement: RefinementConfig::default(),
            training: TrainConfig::default(),
            correction: CorrectionConfig::default(),
            extractor: ExtractorKind::default(),
            enable_correction: true,
            refine_source_first: false,
            scores: ScoreSource::Logits,
            master_seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.correction_epochs == 0 || self.train_epochs == 0 {
            return Err(Error::Config(
                "correction_epochs and train_epochs must be at least 1".into(),
            ));
        }
        self.refinement.validate()?;
        self.training.validate()?;
        self.correction.validate()
    }
}

/// Everything a run needs. Ground truth is optional and only ever reaches
/// [`evaluate`].
#[derive(Debug, Clone, Copy)]
pub struct RunInputs<'a> {
    pub source: &'a Matrix,
    pub source_labels: &'a [usize],
    pub target: &'a Matrix,
    pub num_classes: usize,
    pub target_truth: Option<&'a [usize]>,
    pub source_truth: Option<&'a [usize]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    /// `None` for classes absent from the truth.
    pub per_class_accuracy: Vec<Option<f64>>,
    /// `confusion[truth][predicted]` counts.
    pub confusion: Vec<Vec<usize>>,
}

impl Evaluation {
    /// Confusion matrix with each non-empty row scaled to sum to one.
    pub fn row_normalized(&self) -> Vec<Vec<f64>> {
        self.confusion
            .iter()
            .map(|row| {
                let n: usize = row.iter().sum();
                row.iter()
                    .map(|&v| if n == 0 { 0.0 } else { v as f64 / n as f64 })
                    .collect()
            })
            .collect()
    }
}

/// Scores a labelling against ground truth.
pub fn evaluate_labels(predicted: &[usize], truth: &[usize], num_classes: usize) -> Result<Evaluation> {
    if predicted.len() != truth.len() {
        return Err(Error::DimensionMismatch {
            expected: truth.len(),
            got: predicted.len(),
        });
    }
    check_labels(truth, num_classes)?;
    check_labels(predicted, num_classes)?;
    let mut confusion = vec![vec![0usize; num_classes]; num_classes];
    for (&p, &t) in predicted.iter().zip(truth) {
        confusion[t][p] += 1;
    }
    let correct: usize = (0..num_classes).map(|k| confusion[k][k]).sum();
    let accuracy = if truth.is_empty() {
        0.0
    } else {
        correct as f64 / truth.len() as f64
    };
    let per_class_accuracy = confusion
        .iter()
        .enumerate()
        .map(|(k, row)| {
            let n: usize = row.iter().sum();
            (n > 0).then(|| row[k] as f64 / n as f64)
        })
        .collect();
    Ok(Evaluation {
        accuracy,
        per_class_accuracy,
        confusion,
    })
}

/// Classifier-head accuracy of `model` on `xs`.
pub fn evaluate(model: &Model, xs: &Matrix, truth: &[usize]) -> Result<Evaluation> {
    if truth.len() != xs.rows() {
        return Err(Error::DimensionMismatch {
            expected: xs.rows(),
            got: truth.len(),
        });
    }
    evaluate_labels(&model.predict(xs)?, truth, model.num_classes())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainStage {
    pub s: usize,
    pub e: usize,
    pub mean_loss: f64,
    pub pseudo_label_accuracy: Option<f64>,
    pub classifier_accuracy: Option<f64>,
    pub per_class_accuracy: Option<Vec<Option<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionStage {
    pub s: usize,
    pub enabled: bool,
    pub hard_classes: Vec<usize>,
    pub pair: Option<[usize; 2]>,
    pub num_corrected: usize,
    /// Share of relabelled samples whose new label is the true class.
    pub correction_precision: Option<f64>,
    /// Pseudo-label accuracy after the post-correction recomputation.
    pub pseudo_label_accuracy: Option<f64>,
    pub classifier_accuracy: Option<f64>,
    pub per_class_accuracy: Option<Vec<Option<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "stage", rename_all = "snake_case")]
pub enum StageRecord {
    Train(TrainStage),
    Correction(CorrectionStage),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub s: usize,
    pub e: Option<usize>,
    pub seconds: f64,
}

/// Per-stage metrics in execution order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunMetrics {
    pub source_noise_rate: Option<f64>,
    /// Source noise after the optional self-refinement pass.
    pub source_noise_rate_refined: Option<f64>,
    pub stages: Vec<StageRecord>,
    pub corrections: Vec<CorrectionRecord>,
    pub final_evaluation: Option<Evaluation>,
    /// Full correction reports, including the pair-frequency matrix each
    /// selection was made from.
    #[serde(skip)]
    pub reports: Vec<CorrectionReport>,
    /// Wall clock per stage. Kept out of the serialised metrics so that
    /// identical runs produce identical files.
    #[serde(skip)]
    pub timings: Vec<StageTiming>,
}

impl RunMetrics {
    pub fn train_stages(&self) -> impl Iterator<Item = &TrainStage> {
        self.stages.iter().filter_map(|s| match s {
            StageRecord::Train(t) => Some(t),
            _ => None,
        })
    }

    pub fn correction_stages(&self) -> impl Iterator<Item = &CorrectionStage> {
        self.stages.iter().filter_map(|s| match s {
            StageRecord::Correction(c) => Some(c),
            _ => None,
        })
    }

    pub fn final_accuracy(&self) -> Option<f64> {
        self.final_evaluation.as_ref().map(|e| e.accuracy)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialise")
    }

    /// Flat CSV, one row per stage, numbers with six decimals.
    pub fn to_csv(&self, num_classes: usize) -> String {
        let f6 = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
        let mut out = String::from(
            "stage_type,s,e,mean_loss,pseudo_label_accuracy,classifier_accuracy,pair_alpha,pair_beta,num_corrected",
        );
        for k in 0..num_classes {
            out.push_str(&format!(",class_{k}_accuracy"));
        }
        out.push('\n');
        let per_class = |p: &Option<Vec<Option<f64>>>| -> String {
            (0..num_classes)
                .map(|k| f6(p.as_ref().and_then(|v| v.get(k).copied().flatten())))
                .collect::<Vec<_>>()
                .join(",")
        };
        for stage in &self.stages {
            let line = match stage {
                StageRecord::Train(t) => format!(
                    "train,{},{},{:.6},{},{},,,,{}",
                    t.s,
                    t.e,
                    t.mean_loss,
                    f6(t.pseudo_label_accuracy),
                    f6(t.classifier_accuracy),
                    per_class(&t.per_class_accuracy)
                ),
                StageRecord::Correction(c) => format!(
                    "correction,{},,,{},{},{},{},{},{}",
                    c.s,
                    f6(c.pseudo_label_accuracy),
                    f6(c.classifier_accuracy),
                    c.pair.map_or(String::new(), |p| p[0].to_string()),
                    c.pair.map_or(String::new(), |p| p[1].to_string()),
                    c.num_corrected,
                    per_class(&c.per_class_accuracy)
                ),
            };
            out.push_str(&line);
            out.push('\n');
        }
        out
    }

    /// Correction records, one JSON object per line.
    pub fn corrections_jsonl(&self) -> String {
        self.corrections
            .iter()
            .map(|r| r.to_json_line() + "\n")
            .collect()
    }
}

fn accuracy(labels: &[usize], truth: Option<&[usize]>) -> Option<f64> {
    truth.map(|t| 1.0 - noise_rate(labels, t))
}

fn check_inputs(inputs: &RunInputs<'_>) -> Result<()> {
    let c = inputs.num_classes;
    if c < 2 {
        return Err(Error::DegenerateClassCount(c));
    }
    if inputs.source.cols() != inputs.target.cols() {
        return Err(Error::DimensionMismatch {
            expected: inputs.source.cols(),
            got: inputs.target.cols(),
        });
    }
    if inputs.source_labels.len() != inputs.source.rows() {
        return Err(Error::DimensionMismatch {
            expected: inputs.source.rows(),
            got: inputs.source_labels.len(),
        });
    }
    check_labels(inputs.source_labels, c)?;
    if let Some(t) = inputs.target_truth {
        if t.len() != inputs.target.rows() {
            return Err(Error::DimensionMismatch {
                expected: inputs.target.rows(),
                got: t.len(),
            });
        }
    }
    if let Some(t) = inputs.source_truth {
        if t.len() != inputs.source.rows() {
            return Err(Error::DimensionMismatch {
                expected: inputs.source.rows(),
                got: t.len(),
            });
        }
    }
    Ok(())
}

/// Runs the schedule and returns the trained model with its metrics.
///
/// ```text
/// for s in 0..S
///     for e in 0..E
///         refine target pseudo-labels (M iterations)
///         train one epoch on them
///     if correction enabled
///         losses, hard classes, top-2 pair frequencies, most confusing pair
///         relabel its noisy members, then re-derive prototypes and labels
/// ```
///
/// The shared bank re-derived after a correction seeds the refinement of the
/// next train epoch, which is how a correction reaches the training labels.
pub fn run(inputs: &RunInputs<'_>, cfg: &PipelineConfig) -> Result<(Model, RunMetrics)> {
    cfg.validate()?;
    check_inputs(inputs)?;
    let c = inputs.num_classes;
    let spec = ModelSpec {
        input_dim: inputs.source.cols(),
        num_classes: c,
        extractor: cfg.extractor,
    };
    let mut model = Model::new(&spec, derive_seed(cfg.master_seed, 1))?;
    let training = TrainConfig {
        seed: derive_seed(cfg.master_seed, 2 ^ cfg.training.seed.rotate_left(17)),
        ..cfg.training.clone()
    };
    let mut metrics = RunMetrics {
        source_noise_rate: inputs
            .source_truth
            .map(|t| noise_rate(inputs.source_labels, t)),
        ..RunMetrics::default()
    };

    let mut source_labels = inputs.source_labels.to_vec();
    if cfg.refine_source_first {
        let r = refine_source_labels(&model, inputs.source, &source_labels, inputs.source_truth)
            .map_err(|e| e.in_stage("source refinement"))?;
        metrics.source_noise_rate_refined = r.noise_after;
        source_labels = r.labels;
    }

    let truth = inputs.target_truth;
    let mut carried: Option<PrototypeBank> = None;
    let mut pseudo = Vec::new();
    let mut epoch = 0usize;
    for s in 0..cfg.correction_epochs {
        for e in 0..cfg.train_epochs {
            let t0 = Instant::now();
            let start = carried.as_ref().map_or(RefineStart::SourceBank, RefineStart::Bank);
            let refined = refine_target_from(
                &model,
                inputs.source,
                &source_labels,
                inputs.target,
                &cfg.refinement,
                start,
            )
            .map_err(|err| err.in_stage(format!("refinement s={s} e={e}")))?;
            carried = None;
            pseudo = refined.labels;
            let (next, mean_loss) = model
                .train_epoch(inputs.target, &pseudo, &training, epoch)
                .map_err(|err| err.in_stage(format!("training s={s} e={e}")))?;
            model = next;
            epoch += 1;
            let eval = match truth {
                Some(t) => Some(evaluate(&model, inputs.target, t)?),
                None => None,
            };
            metrics.stages.push(StageRecord::Train(TrainStage {
                s,
                e,
                mean_loss,
                pseudo_label_accuracy: accuracy(&pseudo, truth),
                classifier_accuracy: eval.as_ref().map(|v| v.accuracy),
                per_class_accuracy: eval.map(|v| v.per_class_accuracy),
            }));
            metrics.timings.push(StageTiming {
                stage: "train".into(),
                s,
                e: Some(e),
                seconds: t0.elapsed().as_secs_f64(),
            });
        }

        let t0 = Instant::now();
        let mut stage = CorrectionStage {
            s,
            enabled: cfg.enable_correction,
            hard_classes: Vec::new(),
            pair: None,
            num_corrected: 0,
            correction_precision: None,
            pseudo_label_accuracy: None,
            classifier_accuracy: None,
            per_class_accuracy: None,
        };
        if cfg.enable_correction {
            let (report, recomputed) =
                correction_round(&model, inputs, &source_labels, &pseudo, cfg)
                    .map_err(|err| err.in_stage(format!("correction s={s}")))?;
            stage.hard_classes = report.hard_classes.iter().copied().collect();
            stage.pair = report.selected_pair.map(|(a, b)| [a, b]);
            stage.num_corrected = report.corrected_indices.len();
            if let (Some(t), Some((_, beta))) = (truth, report.selected_pair) {
                let idx = &report.corrected_indices;
                if !idx.is_empty() {
                    let right = idx.iter().filter(|&&i| t[i] == beta).count();
                    stage.correction_precision = Some(right as f64 / idx.len() as f64);
                }
            }
            if let Some((labels, bank)) = recomputed {
                stage.pseudo_label_accuracy = accuracy(&labels, truth);
                pseudo = labels;
                carried = Some(bank);
            }
            metrics.corrections.push(CorrectionRecord::from_report(s, &report));
            metrics.reports.push(report);
        }
        if let Some(t) = truth {
            let eval = evaluate(&model, inputs.target, t)?;
            stage.classifier_accuracy = Some(eval.accuracy);
            stage.per_class_accuracy = Some(eval.per_class_accuracy);
        }
        metrics.stages.push(StageRecord::Correction(stage));
        metrics.timings.push(StageTiming {
            stage: "correction".into(),
            s,
            e: None,
            seconds: t0.elapsed().as_secs_f64(),
        });
    }
    let _ = pseudo;
    if let Some(t) = truth {
        metrics.final_evaluation = Some(evaluate(&model, inputs.target, t)?);
    }
    Ok((model, metrics))
}

type Recomputed = Option<(Vec<usize>, PrototypeBank)>;

/// One correction round on the current model and pseudo-labels. When a pair
/// is corrected, the corrected labels seed a fresh refinement whose labels
/// and shared bank are returned.
fn correction_round(
    model: &Model,
    inputs: &RunInputs<'_>,
    source_labels: &[usize],
    pseudo: &[usize],
    cfg: &PipelineConfig,
) -> Result<(CorrectionReport, Recomputed)> {
    let c = inputs.num_classes;
    // one forward pass feeds both the hard-class split and the noisy-sample pick
    let (_, losses) = model.cross_entropy(inputs.target, pseudo)?;
    let (hard, _) = hard_class_set(&losses, pseudo, c, &cfg.correction)?;
    let scores = match cfg.scores {
        ScoreSource::Logits => model.predict_scores(inputs.target)?,
        ScoreSource::Prototypes => {
            let r = refine_target_from(
                model,
                inputs.source,
                source_labels,
                inputs.target,
                &cfg.refinement,
                RefineStart::SourceBank,
            )?;
            r.bank.similarities(&r.target_embeddings)?
        }
    };
    let f = pair_frequency(&top_two(&scores)?);
    let pair = select_most_confusing_pair(&f, &hard);
    let mut report = CorrectionReport {
        hard_classes: hard,
        selected_pair: pair,
        corrected_indices: Vec::new(),
        f_snapshot: f,
    };
    let Some(pair) = pair else {
        return Ok((report, None));
    };
    let (corrected, idx) = correct_pair(pseudo, &losses, pair, &cfg.correction)?;
    report.corrected_indices = idx;
    let r = refine_target_from(
        model,
        inputs.source,
        source_labels,
        inputs.target,
        &cfg.refinement,
        RefineStart::SeedLabels(&corrected),
    )?;
    Ok((report, Some((r.labels, r.bank))))
}
