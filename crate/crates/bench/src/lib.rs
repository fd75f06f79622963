//! Shared fixtures for the `cpc-core` benchmarks in `benches/`.

use cpc_core::{
    generate_synthetic_pair, inject_symmetric_noise, EmbeddingDataset, Model, ModelSpec,
    NoiseSpec, PipelineConfig, SyntheticSpec,
};

/// A noisy synthetic benchmark and a freshly initialised model for it.
pub struct Fixture {
    pub source: EmbeddingDataset,
    pub target: EmbeddingDataset,
    pub model: Model,
    pub config: PipelineConfig,
}

impl Fixture {
    pub fn new(num_classes: usize, per_class: usize) -> Self {
        let spec = SyntheticSpec {
            num_classes,
            samples_per_class_source: per_class,
            samples_per_class_target: per_class,
            ..SyntheticSpec::default()
        };
        let pair = generate_synthetic_pair(&spec).expect("benchmark spec is valid");
        let source = inject_symmetric_noise(&pair.source, &NoiseSpec { p_noise: 0.4, seed: 100 })
            .expect("noise spec is valid");
        let config = PipelineConfig::default();
        let model = Model::new(
            &ModelSpec {
                input_dim: spec.dim,
                num_classes,
                extractor: config.extractor,
            },
            0,
        )
        .expect("model spec is valid");
        Fixture {
            source,
            target: pair.target.unlabeled(),
            model,
            config,
        }
    }

    pub fn source_labels(&self) -> &[usize] {
        self.source.labels().expect("source is labelled")
    }
}
