//! Brute-force reference implementations for tests.
//!
//! Nothing here calls into the algorithm modules' internals: each routine
//! recomputes its answer from the raw inputs with the most direct method
//! available, trading speed for obviousness.

use crate::correction::{PairFrequency, TopTwoMatrix};
use crate::matrix::Matrix;
use crate::model::Model;
use crate::prototype::PrototypeBank;

/// Double loop over all ordered pairs, rescanning every row each time.
pub fn oracle_pair_frequency(m: &TopTwoMatrix) -> PairFrequency {
    let c = m.num_classes();
    let mut f = vec![vec![0.0; c]; c];
    let mut row_support = vec![0usize; c];
    for alpha in 0..c {
        let support = m.rows().iter().filter(|r| r.0 == alpha).count();
        row_support[alpha] = support;
        for beta in 0..c {
            let hits = m.rows().iter().filter(|r| r.0 == alpha && r.1 == beta).count();
            f[alpha][beta] = if support == 0 {
                0.0
            } else {
                hits as f64 / support as f64
            };
        }
    }
    PairFrequency { f, row_support }
}

/// Kept index sets after trimming, by sorting every member's distance.
pub fn oracle_trim(
    embeddings: &Matrix,
    labels: &[usize],
    bank: &PrototypeBank,
    tau: f64,
) -> Vec<Vec<usize>> {
    (0..bank.num_classes())
        .map(|k| {
            let mut scored: Vec<(f64, usize)> = Vec::new();
            for i in 0..labels.len() {
                if labels[i] != k {
                    continue;
                }
                let mut sq = 0.0;
                for j in 0..embeddings.cols() {
                    let d = embeddings.get(i, j) - bank.row(k)[j];
                    sq += d * d;
                }
                scored.push((sq.sqrt(), i));
            }
            if !bank.is_valid(k) {
                return scored.iter().map(|s| s.1).collect();
            }
            // (distance, index) lexicographic: nearest first, lower index on ties
            scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let n = scored.len();
            let mut keep = (tau * n as f64 * (1.0 + 1e-9)).floor() as usize;
            keep = keep.max(1).min(n);
            let mut kept: Vec<usize> = scored[..keep].iter().map(|s| s.1).collect();
            kept.sort();
            kept
        })
        .collect()
}

/// Central-difference gradient of `f` at `params`.
pub fn numeric_gradient(f: impl Fn(&[f64]) -> f64, params: &[f64], epsilon: f64) -> Vec<f64> {
    assert!(epsilon > 0.0, "epsilon must be positive");
    let mut p = params.to_vec();
    (0..params.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + epsilon;
            let up = f(&p);
            p[i] = orig - epsilon;
            let down = f(&p);
            p[i] = orig;
            (up - down) / (2.0 * epsilon)
        })
        .collect()
}

/// Numeric gradient of mean cross-entropy plus `weight_decay * 0.5 * |params|^2`.
pub fn oracle_grad(
    model: &Model,
    xs: &Matrix,
    labels: &[usize],
    weight_decay: f64,
    epsilon: f64,
) -> Vec<f64> {
    let objective = |p: &[f64]| {
        let mut m = model.clone();
        m.set_params(p).expect("parameter count");
        // per-sample losses, then a plain mean
        let (_, per) = m.cross_entropy(xs, labels).expect("valid inputs");
        let ce = per.iter().sum::<f64>() / per.len() as f64;
        ce + 0.5 * weight_decay * p.iter().map(|w| w * w).sum::<f64>()
    };
    numeric_gradient(objective, &model.params(), epsilon)
}

/// Nearest class mean by Euclidean distance, means taken from labelled data.
pub fn nearest_mean_classify(
    train: &Matrix,
    train_labels: &[usize],
    num_classes: usize,
    queries: &Matrix,
) -> Vec<usize> {
    let d = train.cols();
    let mut means = vec![vec![0.0; d]; num_classes];
    let mut n = vec![0.0; num_classes];
    for (i, &y) in train_labels.iter().enumerate() {
        n[y] += 1.0;
        for j in 0..d {
            means[y][j] += train.get(i, j);
        }
    }
    for k in 0..num_classes {
        for j in 0..d {
            means[k][j] /= n[k];
        }
    }
    (0..queries.rows())
        .map(|i| {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (k, mean) in means.iter().enumerate() {
                let dist: f64 = (0..d).map(|j| (queries.get(i, j) - mean[j]).powi(2)).sum();
                if dist < best_d {
                    best_d = dist;
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// Nearest prototype by cosine, computed from unnormalised inputs.
pub fn oracle_cosine_label(embeddings: &Matrix, bank: &PrototypeBank) -> Vec<usize> {
    (0..embeddings.rows())
        .map(|i| {
            let x = embeddings.row(i);
            let xn = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let mut best = usize::MAX;
            let mut best_s = f64::NEG_INFINITY;
            for k in 0..bank.num_classes() {
                if !bank.is_valid(k) {
                    continue;
                }
                let p = bank.row(k);
                let pn = p.iter().map(|v| v * v).sum::<f64>().sqrt();
                let s = x.iter().zip(p).map(|(a, b)| a * b).sum::<f64>() / (xn * pn);
                if best == usize::MAX || s > best_s {
                    best = k;
                    best_s = s;
                }
            }
            best
        })
        .collect()
}

/// Softmax cross-entropy of one logit row, written out longhand.
pub fn oracle_softmax_ce(logits: &[f64], label: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for l in logits {
        z += (l - m).exp();
    }
    -((logits[label] - m).exp() / z).ln()
}
