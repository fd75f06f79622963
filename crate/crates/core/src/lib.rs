//! Prototype-based pseudo-labeling with confusing-pair label correction for
//! unsupervised domain adaptation when the source labels are noisy.
//!
//! The crate is organised bottom-up:
//!
//! * [`data`] holds feature datasets, the text file format, symmetric label
//!   noise and a synthetic two-domain generator with a designed hard pair.
//! * [`model`] is a small trainable extractor plus linear softmax head.
//! * [`prototype`] builds class prototypes, pseudo-labels target samples by
//!   cosine similarity and refines a shared source/target prototype bank.
//! * [`correction`] finds hard classes by their mean loss, tallies top-2
//!   predictions and relabels the noisy half of the most confusing pair.
//! * [`pipeline`] wires the above into the full training schedule.
//! * `oracle` (feature `oracle`) carries brute-force reference versions
//!   used by the test suites.

pub mod correction;
pub mod data;
mod error;
mod matrix;
pub mod model;
pub mod pipeline;
pub mod prototype;
pub mod rng;

#[cfg(feature = "oracle")]
pub mod oracle;

pub use correction::{
    correct_pair, hard_class_set, pair_frequency, select_most_confusing_pair, top_two,
    CorrectionConfig, CorrectionRecord, CorrectionReport, HardDirection, NoisyPolicy,
    PairFrequency, TopTwoMatrix, ZetaPolicy,
};
pub use data::{
    generate_synthetic_pair, inject_symmetric_noise, load_dataset, load_truth, save_dataset,
    save_truth, Domain, EmbeddingDataset, NoiseSpec, SyntheticSpec,
};
pub use error::{Error, Result};
pub use matrix::Matrix;
pub use model::{ExtractorKind, Model, ModelSpec, TrainConfig};
pub use pipeline::{evaluate, run, Evaluation, PipelineConfig, RunInputs, RunMetrics, ScoreSource};
pub use prototype::{
    class_prototypes, merge_prototypes, pseudo_label, refine_source_labels, refine_target,
    trim_and_recompute, PrototypeBank, RefinementConfig,
};
