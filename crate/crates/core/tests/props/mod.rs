//! Property checks shared by the invariant suite and the acceptance run.

use std::collections::BTreeSet;
use std::time::Instant;

use crate::common::{random_labels, random_matrix, small_model, Bench};
use cpc_core::prototype::keep_count;
use cpc_core::rng::rng_from_seed;
use cpc_core::*;
use proptest::collection::vec;
use proptest::prelude::*;

fn labeled(features: Matrix, labels: Vec<usize>, c: usize) -> EmbeddingDataset {
    EmbeddingDataset::new(features, Some(labels), c, Domain::Source).unwrap()
}

fn dataset_strategy() -> impl Strategy<Value = (EmbeddingDataset, u64)> {
    (2usize..7, 1usize..5, 1usize..60, any::<u64>()).prop_map(|(c, d, n, seed)| {
        let mut rng = rng_from_seed(seed);
        let x = random_matrix(&mut rng, n, d);
        let y = random_labels(&mut rng, n, c);
        (labeled(x, y, c), seed)
    })
}

fn config(cases: u32) -> ProptestConfig {
    ProptestConfig {
        cases,
        failure_persistence: None,
        ..ProptestConfig::default()
    }
}

/// Random top-two matrix with `c` classes.
fn top_two_strategy() -> impl Strategy<Value = TopTwoMatrix> {
    (2usize..8).prop_flat_map(|c| {
        vec((0..c, 1..c), 0..120).prop_map(move |rows| {
            let rows = rows
                .into_iter()
                .map(|(a, off)| (a, (a + off) % c))
                .collect();
            TopTwoMatrix::new(rows, c).unwrap()
        })
    })
}

proptest! {
    #![proptest_config(config(256))]

    fn noise_is_reproducible_and_keeps_features((ds, seed) in dataset_strategy(), p in 0.0f64..=1.0) {
        let spec = NoiseSpec { p_noise: p, seed };
        let a = inject_symmetric_noise(&ds, &spec).unwrap();
        let b = inject_symmetric_noise(&ds, &spec).unwrap();
        prop_assert_eq!(a.labels(), b.labels());
        prop_assert_eq!(a.features(), ds.features());
        prop_assert_eq!(a.len(), ds.len());
        prop_assert_eq!(a.dim(), ds.dim());
        prop_assert_eq!(a.num_classes(), ds.num_classes());
    }

    fn noise_only_moves_to_other_classes((ds, seed) in dataset_strategy()) {
        let out = inject_symmetric_noise(&ds, &NoiseSpec { p_noise: 1.0, seed }).unwrap();
        for (a, b) in out.labels().unwrap().iter().zip(ds.labels().unwrap()) {
            prop_assert_ne!(a, b);
        }
    }

    fn generator_is_deterministic(seed in any::<u64>(), c in 2usize..6, d in 3usize..8) {
        let spec = SyntheticSpec {
            num_classes: c,
            dim: d,
            samples_per_class_source: 5,
            samples_per_class_target: 4,
            class_separation: 2.0,
            seed,
            ..SyntheticSpec::default()
        };
        let a = generate_synthetic_pair(&spec).unwrap();
        let b = generate_synthetic_pair(&spec).unwrap();
        let bits = |m: &Matrix| m.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(a.source.features()), bits(b.source.features()));
        prop_assert_eq!(bits(a.target.features()), bits(b.target.features()));
        prop_assert_eq!(a.source.labels(), b.source.labels());
        prop_assert_eq!(a.target.labels(), b.target.labels());
    }

    fn cross_entropy_survives_huge_logits(scale in 1.0f64..1e4, seed in any::<u64>()) {
        let mut rng = rng_from_seed(seed);
        let w = random_matrix(&mut rng, 3, 4);
        let head = Matrix::from_vec(3, 4, w.as_slice().iter().map(|v| v * scale).collect()).unwrap();
        let model = Model::identity_with_head(head, vec![0.0; 4]).unwrap();
        let xs = random_matrix(&mut rng, 6, 3);
        let xs = Matrix::from_vec(6, 3, xs.as_slice().iter().map(|v| v.signum()).collect()).unwrap();
        let labels = random_labels(&mut rng, 6, 4);
        let (mean, per) = model.cross_entropy(&xs, &labels).unwrap();
        prop_assert!(mean.is_finite());
        prop_assert!(per.iter().all(|l| l.is_finite() && *l >= 0.0));
    }

    fn pseudo_labels_ignore_row_scale(
        seed in any::<u64>(),
        scales in vec(1e-3f64..1e3, 30),
    ) {
        let mut rng = rng_from_seed(seed);
        let emb = random_matrix(&mut rng, 30, 5);
        let bank = PrototypeBank::from_rows(random_matrix(&mut rng, 4, 5));
        let scaled = Matrix::from_rows(
            &emb.iter_rows()
                .zip(&scales)
                .map(|(r, s)| r.iter().map(|v| v * s).collect())
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let (a, _) = pseudo_label(&emb.l2_normalized_rows(), &bank).unwrap();
        let (b, _) = pseudo_label(&scaled.l2_normalized_rows(), &bank).unwrap();
        prop_assert_eq!(a, b);
    }

    fn full_keep_fraction_matches_plain_prototypes(seed in any::<u64>(), n in 1usize..80, c in 1usize..6) {
        let mut rng = rng_from_seed(seed);
        let emb = random_matrix(&mut rng, n, 4).l2_normalized_rows();
        let labels = random_labels(&mut rng, n, c);
        let bank = class_prototypes(&emb, &labels, c).unwrap();
        let trimmed = trim_and_recompute(&emb, &labels, &bank, 1.0).unwrap();
        let bits = |b: &PrototypeBank| b.vectors().as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&trimmed), bits(&bank));
        prop_assert_eq!(trimmed.counts(), bank.counts());
    }

    fn trimming_keeps_exact_counts(seed in any::<u64>(), n in 1usize..120, c in 1usize..6, tau in 0.01f64..=1.0) {
        let mut rng = rng_from_seed(seed);
        let emb = random_matrix(&mut rng, n, 3).l2_normalized_rows();
        let labels = random_labels(&mut rng, n, c);
        let bank = class_prototypes(&emb, &labels, c).unwrap();
        let trimmed = trim_and_recompute(&emb, &labels, &bank, tau).unwrap();
        for k in 0..c {
            let members = labels.iter().filter(|&&y| y == k).count();
            let expected = if members == 0 { 0 } else { ((tau * members as f64 * (1.0 + 1e-9)).floor() as usize).max(1) };
            prop_assert_eq!(trimmed.counts()[k], expected);
            prop_assert_eq!(keep_count(members, tau), expected);
        }
    }

    fn merged_rows_are_unit(seed in any::<u64>(), c in 1usize..8, d in 1usize..9) {
        let mut rng = rng_from_seed(seed);
        let a = PrototypeBank::from_rows(random_matrix(&mut rng, c, d));
        let b = PrototypeBank::from_rows(random_matrix(&mut rng, c, d));
        let m = merge_prototypes(&a, &b).unwrap();
        for k in 0..c {
            if m.is_valid(k) {
                let norm = m.row(k).iter().map(|v| v * v).sum::<f64>().sqrt();
                prop_assert!((norm - 1.0).abs() < 1e-9, "row {} has norm {}", k, norm);
            }
        }
    }

    fn supported_frequency_rows_sum_to_one(m in top_two_strategy()) {
        let f = pair_frequency(&m);
        for a in 0..m.num_classes() {
            let total: f64 = f.f[a].iter().sum();
            if f.row_support[a] > 0 {
                prop_assert!((total - 1.0).abs() < 1e-12);
                // rational check: counts recovered from frequencies sum to the support
                let counts: usize = f.f[a].iter().map(|v| (v * f.row_support[a] as f64).round() as usize).sum();
                prop_assert_eq!(counts, f.row_support[a]);
            } else {
                prop_assert_eq!(total, 0.0);
            }
        }
    }

    fn selected_pair_meets_constraints(m in top_two_strategy(), mask in vec(any::<bool>(), 8)) {
        let f = pair_frequency(&m);
        let hard: BTreeSet<usize> = (0..m.num_classes()).filter(|&k| mask[k]).collect();
        if let Some((a, b)) = select_most_confusing_pair(&f, &hard) {
            prop_assert!(hard.contains(&a) && hard.contains(&b));
            prop_assert!(a != b);
            prop_assert!(f.get(a, b) > f.get(b, a));
            for &x in &hard {
                for &y in &hard {
                    if x != y && f.get(x, y) > f.get(y, x) {
                        prop_assert!(f.get(x, y) <= f.get(a, b));
                    }
                }
            }
        } else {
            for &x in &hard {
                for &y in &hard {
                    prop_assert!(x == y || f.get(x, y) <= f.get(y, x));
                }
            }
        }
    }

    fn frequencies_ignore_row_order(seed in any::<u64>(), n in 1usize..100, c in 2usize..7) {
        let mut rng = rng_from_seed(seed);
        let scores = random_matrix(&mut rng, n, c);
        let mut order: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let shuffled = scores.select_rows(&order);
        let f1 = pair_frequency(&top_two(&scores).unwrap());
        let f2 = pair_frequency(&top_two(&shuffled).unwrap());
        prop_assert_eq!(&f1, &f2);
        let hard: BTreeSet<usize> = (0..c).collect();
        prop_assert_eq!(select_most_confusing_pair(&f1, &hard), select_most_confusing_pair(&f2, &hard));
    }

    fn correction_touches_only_alpha(
        seed in any::<u64>(),
        n in 1usize..80,
        c in 2usize..7,
        rho in prop::option::of(0.01f64..=1.0),
    ) {
        let mut rng = rng_from_seed(seed);
        let labels = random_labels(&mut rng, n, c);
        let losses: Vec<f64> = (0..n).map(|_| rand::Rng::random_range(&mut rng, 0.0..5.0)).collect();
        let alpha = labels[0];
        let beta = (alpha + 1) % c;
        let cfg = CorrectionConfig {
            noisy: rho.map_or(NoisyPolicy::AboveClassMean, NoisyPolicy::TopFraction),
            ..CorrectionConfig::default()
        };
        let (out, idx) = correct_pair(&labels, &losses, (alpha, beta), &cfg).unwrap();
        for i in 0..n {
            if out[i] != labels[i] {
                prop_assert_eq!(labels[i], alpha);
                prop_assert_eq!(out[i], beta);
                prop_assert!(idx.contains(&i));
            }
        }
        for k in (0..c).filter(|&k| k != alpha && k != beta) {
            let before = labels.iter().filter(|&&y| y == k).count();
            let after = out.iter().filter(|&&y| y == k).count();
            prop_assert_eq!(before, after);
        }
    }
}

proptest! {
    #![proptest_config(config(24))]

    fn training_is_deterministic(seed in any::<u64>(), n in 2usize..40) {
        let mut rng = rng_from_seed(seed);
        let xs = random_matrix(&mut rng, n, 4);
        let labels = random_labels(&mut rng, n, 3);
        let cfg = TrainConfig { batch_size: 8, epochs: 2, weight_decay: 1e-3, seed, ..TrainConfig::default() };
        let (a, la) = small_model(4, 3, 3, seed).fit(&xs, &labels, &cfg).unwrap();
        let (b, lb) = small_model(4, 3, 3, seed).fit(&xs, &labels, &cfg).unwrap();
        let bits = |m: &Model| m.params().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&a), bits(&b));
        prop_assert_eq!(la, lb);
    }

    fn full_batch_training_ignores_row_order(seed in any::<u64>(), n in 2usize..40) {
        let mut rng = rng_from_seed(seed);
        let xs = random_matrix(&mut rng, n, 4);
        let labels = random_labels(&mut rng, n, 3);
        let mut order: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let xs_p = xs.select_rows(&order);
        let labels_p: Vec<usize> = order.iter().map(|&i| labels[i]).collect();
        let cfg = TrainConfig { batch_size: n, epochs: 3, weight_decay: 1e-2, seed, ..TrainConfig::default() };
        let (a, la) = small_model(4, 3, 3, seed).fit(&xs, &labels, &cfg).unwrap();
        let (b, lb) = small_model(4, 3, 3, seed).fit(&xs_p, &labels_p, &cfg).unwrap();
        let bits = |m: &Model| m.params().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&a), bits(&b));
        let lbits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(lbits(&la), lbits(&lb));
    }
}

fn short_schedule() -> PipelineConfig {
    PipelineConfig {
        correction_epochs: 3,
        train_epochs: 2,
        ..PipelineConfig::default()
    }
}

proptest! {
    #![proptest_config(config(6))]

    fn run_records_every_stage(s in 1usize..4, e in 1usize..4, correct in any::<bool>()) {
        let bench = Bench::new(3);
        let cfg = PipelineConfig {
            correction_epochs: s,
            train_epochs: e,
            enable_correction: correct,
            ..PipelineConfig::default()
        };
        let m = bench.run(&cfg);
        prop_assert_eq!(m.train_stages().count(), s * e);
        prop_assert_eq!(m.correction_stages().count(), s);
        if correct {
            prop_assert_eq!(m.corrections.len(), s);
        }
    }

    fn disabled_correction_ignores_its_config(q in 0.0f64..=1.0, rho in 0.05f64..=1.0, below in any::<bool>()) {
        let bench = Bench::new(5);
        let base = PipelineConfig { enable_correction: false, ..short_schedule() };
        let other = PipelineConfig {
            correction: CorrectionConfig {
                zeta: ZetaPolicy::Quantile(q),
                noisy: NoisyPolicy::TopFraction(rho),
                direction: if below { HardDirection::AtOrBelow } else { HardDirection::Above },
            },
            ..base.clone()
        };
        let a = bench.run(&base);
        let b = bench.run(&other);
        prop_assert_eq!(a.to_json(), b.to_json());
        prop_assert_eq!(a.to_csv(6), b.to_csv(6));
    }
}

pub fn wall_clock_scales_with_schedule_length() {
    let bench = Bench::new(1);
    let time = |e: usize| {
        let cfg = PipelineConfig {
            correction_epochs: 1,
            train_epochs: e,
            ..PipelineConfig::default()
        };
        (0..3)
            .map(|_| {
                let t = Instant::now();
                bench.run(&cfg);
                t.elapsed().as_secs_f64()
            })
            .fold(f64::INFINITY, f64::min)
    };
    let short = time(2);
    let long = time(8);
    let ratio = long / short;
    assert!(
        (4.0 / 3.0..=12.0).contains(&ratio),
        "4x the epochs took {ratio:.2}x the time"
    );
}

pub fn oracle_imports_only_plain_types() {
    let src = include_str!("../../src/oracle.rs");
    let allowed = [
        "use crate::correction::{PairFrequency, TopTwoMatrix};",
        "use crate::matrix::Matrix;",
        "use crate::model::Model;",
        "use crate::prototype::PrototypeBank;",
    ];
    for line in src.lines().filter(|l| l.starts_with("use ")) {
        assert!(allowed.contains(&line), "unexpected import in oracle: {line}");
    }
    for banned in ["pair_frequency(", "trim_kept_indices(", "trim_and_recompute(", "loss_and_gradient("] {
        let own = format!("oracle_{banned}");
        assert_eq!(src.matches(banned).count(), src.matches(own.as_str()).count(), "oracle calls {banned}");
    }
}

/// Every property, by name.
pub fn all() -> Vec<(&'static str, fn())> {
    vec![
        ("noise_is_reproducible_and_keeps_features", noise_is_reproducible_and_keeps_features),
        ("noise_only_moves_to_other_classes", noise_only_moves_to_other_classes),
        ("generator_is_deterministic", generator_is_deterministic),
        ("cross_entropy_survives_huge_logits", cross_entropy_survives_huge_logits),
        ("pseudo_labels_ignore_row_scale", pseudo_labels_ignore_row_scale),
        ("full_keep_fraction_matches_plain_prototypes", full_keep_fraction_matches_plain_prototypes),
        ("trimming_keeps_exact_counts", trimming_keeps_exact_counts),
        ("merged_rows_are_unit", merged_rows_are_unit),
        ("supported_frequency_rows_sum_to_one", supported_frequency_rows_sum_to_one),
        ("selected_pair_meets_constraints", selected_pair_meets_constraints),
        ("frequencies_ignore_row_order", frequencies_ignore_row_order),
        ("correction_touches_only_alpha", correction_touches_only_alpha),
        ("training_is_deterministic", training_is_deterministic),
        ("full_batch_training_ignores_row_order", full_batch_training_ignores_row_order),
        ("run_records_every_stage", run_records_every_stage),
        ("disabled_correction_ignores_its_config", disabled_correction_ignores_its_config),
        ("wall_clock_scales_with_schedule_length", wall_clock_scales_with_schedule_length),
        ("oracle_imports_only_plain_types", oracle_imports_only_plain_types),
    ]
}

#[allow(dead_code)]
pub fn run(name: &str) {
    let (_, f) = all()
        .into_iter()
        .find(|(n, _)| *n == name)
        .unwrap_or_else(|| panic!("no property named {name}"));
    f();
}
