#![allow(dead_code)]

use cpc_core::*;

pub const PAIR: (usize, usize) = SyntheticSpec::CONFUSABLE_PAIR;

/// The noisy confusable-pair benchmark: six classes, separation 8, pair gap
/// 1.5, target shift 1.0, 40% symmetric source noise.
pub struct Bench {
    pub source: EmbeddingDataset,
    pub noisy_labels: Vec<usize>,
    pub target: EmbeddingDataset,
}

impl Bench {
    pub fn new(seed: u64) -> Bench {
        let spec = SyntheticSpec {
            num_classes: 6,
            class_separation: 8.0,
            confusable_pair_gap: 1.5,
            domain_shift: 1.0,
            seed,
            ..SyntheticSpec::default()
        };
        let pair = generate_synthetic_pair(&spec).unwrap();
        let noisy = inject_symmetric_noise(
            &pair.source,
            &NoiseSpec {
                p_noise: 0.4,
                seed: seed + 100,
            },
        )
        .unwrap();
        Bench {
            noisy_labels: noisy.labels().unwrap().to_vec(),
            source: pair.source,
            target: pair.target,
        }
    }

    pub fn inputs(&self) -> RunInputs<'_> {
        RunInputs {
            source: self.source.features(),
            source_labels: &self.noisy_labels,
            target: self.target.features(),
            num_classes: self.target.num_classes(),
            target_truth: self.target.labels(),
            source_truth: self.source.labels(),
        }
    }

    pub fn run(&self, cfg: &PipelineConfig) -> RunMetrics {
        run(&self.inputs(), cfg).unwrap().1
    }
}

/// Final accuracy and mean accuracy over the confusable pair.
pub fn summarize(m: &RunMetrics) -> (f64, f64) {
    let ev = m.final_evaluation.as_ref().unwrap();
    let pc = &ev.per_class_accuracy;
    (ev.accuracy, (pc[PAIR.0].unwrap() + pc[PAIR.1].unwrap()) / 2.0)
}

pub fn refinement_only(tau: f64) -> PipelineConfig {
    let mut cfg = PipelineConfig {
        enable_correction: false,
        ..PipelineConfig::default()
    };
    cfg.refinement.tau = tau;
    cfg
}

pub fn random_matrix(rng: &mut impl rand::Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

pub fn random_labels(rng: &mut impl rand::Rng, n: usize, c: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..c)).collect()
}

pub fn small_model(d: usize, e: usize, c: usize, seed: u64) -> Model {
    Model::new(
        &ModelSpec {
            input_dim: d,
            num_classes: c,
            extractor: ExtractorKind::Mlp {
                hidden: e + 2,
                embed_dim: e,
            },
        },
        seed,
    )
    .unwrap()
}

/// Largest `|a - n| / max(|a|, |n|, 1e-5)` over paired gradient entries.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-5))
        .fold(0.0, f64::max)
}
