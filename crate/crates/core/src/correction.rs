//! Confusing-pair detection and label correction.
//!
//! 1. Classes whose mean per-sample loss exceeds a threshold are *hard*.
//! 2. Each target sample contributes its (rank-1, rank-2) predicted classes.
//! 3. `f[a][b]` is the share of rank-1 = `a` samples whose runner-up is `b`.
//! 4. The most confusing pair maximises `f[a][b]` over hard `a`, `b` with
//!    `f[a][b] > f[b][a]`.
//! 5. The high-loss samples pseudo-labelled `a` are relabelled `b`.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Threshold on per-class mean loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum ZetaPolicy {
    /// The `q`-quantile of the per-class means (linear interpolation).
    Quantile(f64),
    Absolute(f64),
}

/// Which side of the threshold counts as hard.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HardDirection {
    /// Mean loss strictly above the threshold.
    Above,
    /// Mean loss at or below the threshold.
    AtOrBelow,
}

/// Which members of the chosen class count as noisy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum NoisyPolicy {
    /// Loss strictly above the class mean.
    AboveClassMean,
    /// The `ceil(rho * n)` highest-loss members.
    TopFraction(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrectionConfig {
    pub zeta: ZetaPolicy,
    pub noisy: NoisyPolicy,
    pub direction: HardDirection,
}

impl Default for CorrectionConfig {
    fn default() -> Self {
        CorrectionConfig {
            zeta: ZetaPolicy::Quantile(0.5),
            noisy: NoisyPolicy::AboveClassMean,
            direction: HardDirection::Above,
        }
    }
}

impl CorrectionConfig {
    pub fn validate(&self) -> Result<()> {
        match self.zeta {
            ZetaPolicy::Quantile(q) if !(q > 0.0 && q < 1.0) => {
                return Err(Error::Config(format!("quantile must lie in (0, 1), got {q}")))
            }
            ZetaPolicy::Absolute(z) if !(z >= 0.0 && z.is_finite()) => {
                return Err(Error::Config(format!("zeta must be non-negative, got {z}")))
            }
            _ => {}
        }
        if let NoisyPolicy::TopFraction(r) = self.noisy {
            if !(r > 0.0 && r <= 1.0) {
                return Err(Error::Config(format!("top fraction must lie in (0, 1], got {r}")));
            }
        }
        Ok(())
    }
}

/// Rank-1 and rank-2 predicted class per sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopTwoMatrix {
    rows: Vec<(usize, usize)>,
    num_classes: usize,
}

impl TopTwoMatrix {
    /// Checks `rank1 != rank2` and both `< num_classes` on every row.
    pub fn new(rows: Vec<(usize, usize)>, num_classes: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::DegenerateClassCount(num_classes));
        }
        for (i, &(a, b)) in rows.iter().enumerate() {
            if a == b || a >= num_classes || b >= num_classes {
                return Err(Error::Config(format!(
                    "invalid top-two row {i}: ({a}, {b}) with {num_classes} classes"
                )));
            }
        }
        Ok(TopTwoMatrix { rows, num_classes })
    }

    pub fn rows(&self) -> &[(usize, usize)] {
        &self.rows
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// `f[a][b]`: fraction of rank-1 = `a` rows whose rank-2 is `b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairFrequency {
    pub f: Vec<Vec<f64>>,
    pub row_support: Vec<usize>,
}

impl PairFrequency {
    pub fn num_classes(&self) -> usize {
        self.f.len()
    }

    #[inline]
    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.f[a][b]
    }
}

/// Per-class mean of `losses` over samples carrying that label; `None` for
/// classes without members.
pub fn class_mean_losses(losses: &[f64], labels: &[usize], num_classes: usize) -> Vec<Option<f64>> {
    let mut sum = vec![0.0; num_classes];
    let mut n = vec![0usize; num_classes];
    for (&l, &y) in losses.iter().zip(labels) {
        sum[y] += l;
        n[y] += 1;
    }
    sum.into_iter()
        .zip(n)
        .map(|(s, n)| (n > 0).then(|| s / n as f64))
        .collect()
}

/// Linear-interpolation quantile of `values` (which must be non-empty).
fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Hard classes by the small-loss criterion. Classes with no members are
/// never hard. Returns the set and the threshold used.
pub fn hard_class_set(
    losses: &[f64],
    labels: &[usize],
    num_classes: usize,
    cfg: &CorrectionConfig,
) -> Result<(BTreeSet<usize>, f64)> {
    if losses.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: labels.len(),
            got: losses.len(),
        });
    }
    crate::data::check_labels(labels, num_classes)?;
    let means = class_mean_losses(losses, labels, num_classes);
    let present: Vec<f64> = means.iter().flatten().copied().collect();
    if present.is_empty() {
        return Ok((BTreeSet::new(), f64::NAN));
    }
    let zeta = match cfg.zeta {
        ZetaPolicy::Quantile(q) => quantile(&present, q),
        ZetaPolicy::Absolute(z) => z,
    };
    let hard = means
        .iter()
        .enumerate()
        .filter_map(|(k, m)| {
            let m = (*m)?;
            let is_hard = match cfg.direction {
                HardDirection::Above => m > zeta,
                HardDirection::AtOrBelow => m <= zeta,
            };
            is_hard.then_some(k)
        })
        .collect();
    Ok((hard, zeta))
}

/// Rank-1 and rank-2 classes per row of `scores`, lowest index first on ties.
pub fn top_two(scores: &Matrix) -> Result<TopTwoMatrix> {
    let c = scores.cols();
    if c < 2 {
        return Err(Error::DegenerateClassCount(c));
    }
    let rows = scores
        .iter_rows()
        .map(|row| {
            let (mut first, mut second) = if row[1] > row[0] { (1, 0) } else { (0, 1) };
            for k in 2..c {
                if row[k] > row[first] {
                    second = first;
                    first = k;
                } else if row[k] > row[second] {
                    second = k;
                }
            }
            (first, second)
        })
        .collect();
    TopTwoMatrix::new(rows, c)
}

/// Counts `(rank1, rank2)` co-occurrences and divides by rank-1 support.
/// Rows of classes that never rank first are all zero.
pub fn pair_frequency(m: &TopTwoMatrix) -> PairFrequency {
    let c = m.num_classes();
    let mut counts = vec![vec![0usize; c]; c];
    let mut support = vec![0usize; c];
    for &(a, b) in m.rows() {
        counts[a][b] += 1;
        support[a] += 1;
    }
    let f = counts
        .iter()
        .zip(&support)
        .map(|(row, &s)| {
            row.iter()
                .map(|&n| if s == 0 { 0.0 } else { n as f64 / s as f64 })
                .collect()
        })
        .collect();
    PairFrequency {
        f,
        row_support: support,
    }
}

/// The hard ordered pair `(a, b)` with the largest `f[a][b]` subject to
/// `f[a][b] > f[b][a]`. Ties go to the lexicographically smallest pair.
pub fn select_most_confusing_pair(
    f: &PairFrequency,
    hard: &BTreeSet<usize>,
) -> Option<(usize, usize)> {
    let mut best: Option<((usize, usize), f64)> = None;
    for &a in hard {
        if f.row_support[a] == 0 {
            continue;
        }
        for &b in hard {
            if a == b {
                continue;
            }
            let v = f.get(a, b);
            if v > f.get(b, a) && best.is_none_or(|(_, bv)| v > bv) {
                best = Some(((a, b), v));
            }
        }
    }
    best.map(|(p, _)| p)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionReport {
    pub hard_classes: BTreeSet<usize>,
    pub selected_pair: Option<(usize, usize)>,
    pub corrected_indices: Vec<usize>,
    pub f_snapshot: PairFrequency,
}

/// Relabels the noisy members of class `pair.0` as `pair.1`. Returns the new
/// labels and the indices that changed.
pub fn correct_pair(
    labels: &[usize],
    losses: &[f64],
    pair: (usize, usize),
    cfg: &CorrectionConfig,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if losses.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: labels.len(),
            got: losses.len(),
        });
    }
    let (alpha, beta) = pair;
    if alpha == beta {
        return Err(Error::Config(format!("degenerate pair ({alpha}, {beta})")));
    }
    let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == alpha).collect();
    let mut out = labels.to_vec();
    if members.is_empty() {
        return Ok((out, Vec::new()));
    }
    let noisy: Vec<usize> = match cfg.noisy {
        NoisyPolicy::AboveClassMean => {
            let mean = members.iter().map(|&i| losses[i]).sum::<f64>() / members.len() as f64;
            members.into_iter().filter(|&i| losses[i] > mean).collect()
        }
        NoisyPolicy::TopFraction(rho) => {
            let take = ((rho * members.len() as f64).ceil() as usize).min(members.len());
            let mut ranked = members;
            // highest loss first, index order among equals
            ranked.sort_by(|&i, &j| losses[j].total_cmp(&losses[i]));
            let mut top = ranked[..take].to_vec();
            top.sort_unstable();
            top
        }
    };
    for &i in &noisy {
        out[i] = beta;
    }
    Ok((out, noisy))
}

/// One JSON-lines record per correction epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionRecord {
    pub epoch: usize,
    pub hard_classes: Vec<usize>,
    pub pair: Option<[usize; 2]>,
    pub num_corrected: usize,
    pub f_row_alpha: Option<Vec<f64>>,
}

impl CorrectionRecord {
    pub fn from_report(epoch: usize, report: &CorrectionReport) -> Self {
        CorrectionRecord {
            epoch,
            hard_classes: report.hard_classes.iter().copied().collect(),
            pair: report.selected_pair.map(|(a, b)| [a, b]),
            num_corrected: report.corrected_indices.len(),
            f_row_alpha: report.selected_pair.map(|(a, _)| report.f_snapshot.f[a].clone()),
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("record serialises")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(v: &[usize]) -> BTreeSet<usize> {
        v.iter().copied().collect()
    }

    #[test]
    fn absolute_threshold_split() {
        let losses = [0.1, 0.1, 2.0, 2.0];
        let labels = [0, 0, 1, 1];
        let cfg = CorrectionConfig {
            zeta: ZetaPolicy::Absolute(1.0),
            ..CorrectionConfig::default()
        };
        assert_eq!(hard_class_set(&losses, &labels, 2, &cfg).unwrap().0, set(&[1]));
        let at_or_below = CorrectionConfig {
            direction: HardDirection::AtOrBelow,
            ..cfg
        };
        assert_eq!(hard_class_set(&losses, &labels, 2, &at_or_below).unwrap().0, set(&[0]));
    }

    #[test]
    fn equal_means_give_empty_hard_set() {
        let losses = [0.7; 6];
        let labels = [0, 1, 2, 0, 1, 2];
        let (hard, zeta) = hard_class_set(&losses, &labels, 3, &CorrectionConfig::default()).unwrap();
        assert!(hard.is_empty());
        assert_eq!(zeta, 0.7);
    }

    #[test]
    fn empty_classes_are_never_hard() {
        let losses = [1.0, 3.0];
        let labels = [0, 2];
        let (hard, zeta) = hard_class_set(&losses, &labels, 4, &CorrectionConfig::default()).unwrap();
        assert_eq!(zeta, 2.0);
        assert_eq!(hard, set(&[2]));
    }

    #[test]
    fn quantile_interpolates() {
        assert_eq!(quantile(&[4.0, 1.0, 3.0, 2.0], 0.5), 2.5);
        assert_eq!(quantile(&[5.0], 0.3), 5.0);
    }

    #[test]
    fn top_two_hand_cases() {
        let s = Matrix::from_rows(&[vec![0.1, 0.9, 0.3], vec![0.5, 0.5, 0.5], vec![0.0, 0.0, 1.0]])
            .unwrap();
        assert_eq!(top_two(&s).unwrap().rows(), &[(1, 2), (0, 1), (2, 0)]);
        assert!(top_two(&Matrix::zeros(2, 1)).is_err());
    }

    #[test]
    fn top_two_matrix_invariants() {
        assert!(TopTwoMatrix::new(vec![(1, 1)], 3).is_err());
        assert!(TopTwoMatrix::new(vec![(0, 3)], 3).is_err());
        assert!(TopTwoMatrix::new(vec![], 1).is_err());
    }

    #[test]
    fn pair_frequency_hand_cases() {
        let m = TopTwoMatrix::new(vec![(2, 5)], 6).unwrap();
        let f = pair_frequency(&m);
        for a in 0..6 {
            for b in 0..6 {
                assert_eq!(f.get(a, b), if (a, b) == (2, 5) { 1.0 } else { 0.0 });
            }
        }
        let m = TopTwoMatrix::new(vec![(0, 1), (0, 1), (0, 2), (1, 0)], 3).unwrap();
        let f = pair_frequency(&m);
        assert_eq!(f.get(0, 1), 2.0 / 3.0);
        assert_eq!(f.get(0, 2), 1.0 / 3.0);
        assert_eq!(f.get(1, 0), 1.0);
        assert_eq!(f.f[2], vec![0.0; 3]);
        assert_eq!(f.row_support, vec![3, 1, 0]);
    }

    fn freq(entries: &[((usize, usize), f64)], c: usize) -> PairFrequency {
        let mut f = vec![vec![0.0; c]; c];
        for &((a, b), v) in entries {
            f[a][b] = v;
        }
        PairFrequency {
            f,
            row_support: vec![1; c],
        }
    }

    #[test]
    fn unique_maximiser_is_selected() {
        let f = freq(&[((3, 7), 0.6), ((7, 3), 0.2), ((1, 2), 0.5)], 8);
        assert_eq!(select_most_confusing_pair(&f, &set(&[1, 2, 3, 7])), Some((3, 7)));
        // not hard -> skipped
        assert_eq!(select_most_confusing_pair(&f, &set(&[1, 2, 3])), Some((1, 2)));
    }

    #[test]
    fn symmetric_frequencies_select_nothing() {
        let f = freq(&[((0, 1), 0.5), ((1, 0), 0.5), ((1, 2), 0.3), ((2, 1), 0.3)], 3);
        assert_eq!(select_most_confusing_pair(&f, &set(&[0, 1, 2])), None);
    }

    #[test]
    fn lexicographic_tie_break() {
        let f = freq(&[((2, 0), 0.4), ((0, 1), 0.4)], 3);
        assert_eq!(select_most_confusing_pair(&f, &set(&[0, 1, 2])), Some((0, 1)));
    }

    #[test]
    fn above_mean_correction() {
        let labels = [4, 4, 1, 4];
        let losses = [0.1, 0.1, 9.0, 5.0];
        let (out, idx) = correct_pair(&labels, &losses, (4, 2), &CorrectionConfig::default()).unwrap();
        assert_eq!(out, vec![4, 4, 1, 2]);
        assert_eq!(idx, vec![3]);
    }

    #[test]
    fn empty_alpha_corrects_nothing() {
        let (out, idx) = correct_pair(&[0, 1], &[1.0, 2.0], (2, 0), &CorrectionConfig::default()).unwrap();
        assert_eq!(out, vec![0, 1]);
        assert!(idx.is_empty());
    }

    #[test]
    fn full_fraction_relabels_all() {
        let cfg = CorrectionConfig {
            noisy: NoisyPolicy::TopFraction(1.0),
            ..CorrectionConfig::default()
        };
        let (out, idx) = correct_pair(&[0, 1, 0], &[1.0, 1.0, 1.0], (0, 1), &cfg).unwrap();
        assert_eq!(out, vec![1, 1, 1]);
        assert_eq!(idx, vec![0, 2]);
        let half = CorrectionConfig {
            noisy: NoisyPolicy::TopFraction(0.5),
            ..CorrectionConfig::default()
        };
        let (out, _) = correct_pair(&[0, 0, 0, 0], &[1.0, 4.0, 3.0, 4.0], (0, 1), &half).unwrap();
        assert_eq!(out, vec![0, 1, 0, 1]);
    }

    #[test]
    fn config_validation() {
        let bad = CorrectionConfig {
            zeta: ZetaPolicy::Quantile(1.0),
            ..CorrectionConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = CorrectionConfig {
            noisy: NoisyPolicy::TopFraction(0.0),
            ..CorrectionConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(CorrectionConfig::default().validate().is_ok());
    }

    #[test]
    fn record_json_shape() {
        let report = CorrectionReport {
            hard_classes: set(&[0, 1]),
            selected_pair: Some((1, 0)),
            corrected_indices: vec![3, 4],
            f_snapshot: freq(&[((1, 0), 0.75)], 2),
        };
        let line = CorrectionRecord::from_report(2, &report).to_json_line();
        assert_eq!(
            line,
            r#"{"epoch":2,"hard_classes":[0,1],"pair":[1,0],"num_corrected":2,"f_row_alpha":[0.75,0.0]}"#
        );
        let none = CorrectionReport {
            selected_pair: None,
            corrected_indices: vec![],
            ..report
        };
        assert!(CorrectionRecord::from_report(0, &none).to_json_line().contains(r#""pair":null"#));
    }
}
