#![allow(clippy::field_reassign_with_default)]

use cpc_cli::{CliError, ExperimentConfig};
use cpc_core::{ExtractorKind, HardDirection, NoisyPolicy, ScoreSource, ZetaPolicy};
use proptest::prelude::*;

fn parse_err(text: &str) -> String {
    match ExperimentConfig::parse_text(text) {
        Err(CliError::Config(m)) => m,
        other => panic!("expected a config error, got {other:?}"),
    }
}

#[test]
fn empty_text_gives_defaults() {
    assert_eq!(ExperimentConfig::parse_text("# nothing\n\n").unwrap(), ExperimentConfig::default());
}

#[test]
fn comments_and_spacing() {
    let cfg = ExperimentConfig::parse_text(
        "  training.learning_rate=0.1   # faster\n#seed = 9\nrefinement.tau = 0.7\n",
    )
    .unwrap();
    assert_eq!(cfg.pipeline.training.learning_rate, 0.1);
    assert_eq!(cfg.pipeline.refinement.tau, 0.7);
    assert_eq!(cfg.seed, 0);
}

#[test]
fn policy_values() {
    let cfg = ExperimentConfig::parse_text(
        "correction.zeta = absolute:0.25\ncorrection.noisy = top_fraction:0.3\ncorrection.hard = at_or_below\nscores = prototypes\n",
    )
    .unwrap();
    let c = cfg.pipeline.correction;
    assert_eq!(c.zeta, ZetaPolicy::Absolute(0.25));
    assert_eq!(c.noisy, NoisyPolicy::TopFraction(0.3));
    assert_eq!(c.direction, HardDirection::AtOrBelow);
    assert_eq!(cfg.pipeline.scores, ScoreSource::Prototypes);
}

#[test]
fn extractor_keys() {
    let cfg = ExperimentConfig::parse_text("extractor.hidden = 5\nextractor.embed_dim = 3\n").unwrap();
    assert_eq!(cfg.pipeline.extractor, ExtractorKind::Mlp { hidden: 5, embed_dim: 3 });
    let cfg = ExperimentConfig::parse_text("extractor = identity\n").unwrap();
    assert_eq!(cfg.pipeline.extractor, ExtractorKind::Identity);
    assert!(parse_err("extractor = identity\nextractor.hidden = 4\n").contains("extractor = mlp"));
}

#[test]
fn rejected_inputs_name_the_line() {
    assert!(parse_err("seed = 1\nbogus = 2\n").contains("line 2"));
    assert!(parse_err("seed = 1\nseed = 1\n").contains("duplicate"));
    assert!(parse_err("correction.zeta = median\n").contains("quantile"));
    assert!(parse_err("enable_correction = yes\n").contains("enable_correction"));
    parse_err("seeds = 0\n");
    parse_err("noise.p_noise = 1.5\n");
    parse_err("data.num_classes = 1\n");
    parse_err("training.batch_size = 0\n");
}

#[test]
fn repetition_seeds() {
    let cfg = ExperimentConfig::parse_text("seed = 10\n").unwrap();
    assert_eq!(cfg.pipeline_for(0).master_seed, 10);
    assert_eq!(cfg.pipeline_for(3).master_seed, 13);
}

fn arb_config() -> impl Strategy<Value = ExperimentConfig> {
    (
        (any::<u64>(), 1usize..20, 2usize..12, 1usize..30, 2.0f64..20.0, 0.0f64..1.0, any::<u64>()),
        (1usize..10, 1usize..6, 0.01f64..=1.0, 1usize..6, any::<bool>(), any::<bool>(), any::<bool>()),
        (0.001f64..1.0, 1usize..256, 0.0f64..0.1, any::<bool>(), any::<bool>(), any::<bool>()),
        (0.05f64..0.95, 0.05f64..=1.0, any::<bool>(), any::<bool>(), any::<bool>(), 1usize..64),
    )
        .prop_map(|(a, b, c, d)| {
            let mut cfg = ExperimentConfig::default();
            cfg.seed = a.0;
            cfg.seeds = a.1;
            cfg.data.num_classes = a.2;
            cfg.data.dim = a.3.max(2);
            cfg.data.class_separation = a.4;
            cfg.noise.p_noise = a.5;
            cfg.noise.seed = a.6;
            let p = &mut cfg.pipeline;
            p.correction_epochs = b.0;
            p.train_epochs = b.1;
            p.refinement.tau = b.2;
            p.refinement.refine_iters = b.3;
            p.refinement.enable_trim = b.4;
            p.refinement.trim_source = b.5;
            p.refinement.reinit_every_iter = b.6;
            p.training.learning_rate = c.0;
            p.training.batch_size = c.1;
            p.training.weight_decay = c.2;
            p.enable_correction = c.3;
            p.refine_source_first = c.4;
            p.scores = if c.5 { ScoreSource::Prototypes } else { ScoreSource::Logits };
            p.correction.zeta = if d.2 { ZetaPolicy::Quantile(d.0) } else { ZetaPolicy::Absolute(d.0) };
            p.correction.noisy = if d.3 { NoisyPolicy::TopFraction(d.1) } else { NoisyPolicy::AboveClassMean };
            p.correction.direction = if d.4 { HardDirection::Above } else { HardDirection::AtOrBelow };
            p.extractor = if d.5 % 7 == 0 {
                ExtractorKind::Identity
            } else {
                ExtractorKind::Mlp { hidden: d.5, embed_dim: d.5 / 2 + 1 }
            };
            cfg
        })
}

proptest! {
    #[test]
    fn text_round_trips(cfg in arb_config()) {
        let back = ExperimentConfig::parse_text(&cfg.to_text()).unwrap();
        prop_assert_eq!(back, cfg);
    }
}
