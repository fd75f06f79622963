//! Feature datasets, the on-disk text format, symmetric label noise and the
//! synthetic two-domain generator.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{l2_norm, normalize_in_place, Matrix};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

/// `N x d` feature matrix with optional class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDataset {
    features: Matrix,
    labels: Option<Vec<usize>>,
    num_classes: usize,
    domain: Domain,
}

impl EmbeddingDataset {
    /// Validates shape, finiteness and label range.
    pub fn new(
        features: Matrix,
        labels: Option<Vec<usize>>,
        num_classes: usize,
        domain: Domain,
    ) -> Result<Self> {
        if features.rows() == 0 || features.cols() == 0 {
            return Err(Error::Config(format!(
                "dataset must be non-empty, got {} x {}",
                features.rows(),
                features.cols()
            )));
        }
        if num_classes == 0 {
            return Err(Error::DegenerateClassCount(0));
        }
        if let Some((row, col)) = features.first_non_finite() {
            return Err(Error::NonFinite { row, col });
        }
        if let Some(l) = &labels {
            if l.len() != features.rows() {
                return Err(Error::DimensionMismatch {
                    expected: features.rows(),
                    got: l.len(),
                });
            }
            check_labels(l, num_classes)?;
        }
        Ok(EmbeddingDataset {
            features,
            labels,
            num_classes,
            domain,
        })
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    /// Labels, or [`Error::Unlabeled`].
    pub fn require_labels(&self) -> Result<&[usize]> {
        self.labels.as_deref().ok_or(Error::Unlabeled)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Same features, new labels.
    pub fn with_labels(&self, labels: Vec<usize>) -> Result<Self> {
        EmbeddingDataset::new(
            self.features.clone(),
            Some(labels),
            self.num_classes,
            self.domain,
        )
    }

    /// Drops the labels. Used to hand a target domain to the training path.
    pub fn unlabeled(&self) -> Self {
        EmbeddingDataset {
            features: self.features.clone(),
            labels: None,
            num_classes: self.num_classes,
            domain: self.domain,
        }
    }
}

pub(crate) fn check_labels(labels: &[usize], num_classes: usize) -> Result<()> {
    match labels.iter().position(|&l| l >= num_classes) {
        Some(index) => Err(Error::LabelOutOfRange {
            index,
            label: labels[index],
            num_classes,
        }),
        None => Ok(()),
    }
}

/// Fraction of positions where `labels` and `truth` disagree.
pub fn noise_rate(labels: &[usize], truth: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let wrong = labels.iter().zip(truth).filter(|(a, b)| a != b).count();
    wrong as f64 / labels.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub p_noise: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_noise) {
            return Err(Error::Config(format!(
                "p_noise must lie in [0, 1], got {}",
                self.p_noise
            )));
        }
        Ok(())
    }
}

/// Flips each label with probability `p_noise` to one of the other `C - 1`
/// classes, chosen uniformly. Features are untouched.
pub fn inject_symmetric_noise(ds: &EmbeddingDataset, spec: &NoiseSpec) -> Result<EmbeddingDataset> {
    spec.validate()?;
    let labels = ds.require_labels()?;
    let c = ds.num_classes();
    if c < 2 {
        return Err(Error::DegenerateClassCount(c));
    }
    let mut rng = rng::stream(spec.seed, 0x006e_6f69_7365);
    let noisy = labels
        .iter()
        .map(|&y| {
            if rng.random::<f64>() < spec.p_noise {
                let r = rng.random_range(0..c - 1);
                if r >= y {
                    r + 1
                } else {
                    r
                }
            } else {
                y
            }
        })
        .collect();
    ds.with_labels(noisy)
}

/// Gaussian-cluster two-domain benchmark.
///
/// Class means sit on a sphere of radius `class_separation` around the origin,
/// so nearest-mean and cosine-to-mean classification share their decision
/// boundaries. Classes 0 and 1 form the confusable pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub dim: usize,
    pub samples_per_class_source: usize,
    pub samples_per_class_target: usize,
    pub class_separation: f64,
    pub domain_shift: f64,
    pub confusable_pair_gap: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_classes: 6,
            dim: 8,
            samples_per_class_source: 100,
            samples_per_class_target: 100,
            class_separation: 8.0,
            domain_shift: 1.0,
            confusable_pair_gap: 1.5,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub const CONFUSABLE_PAIR: (usize, usize) = (0, 1);

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_classes < 2 {
            return Err(Error::DegenerateClassCount(self.num_classes));
        }
        if self.dim == 0 || self.samples_per_class_source == 0 || self.samples_per_class_target == 0
        {
            return bad("dim and per-class sample counts must be at least 1".into());
        }
        if !(self.class_separation > 0.0 && self.class_separation.is_finite()) {
            return bad(format!("class_separation must be positive, got {}", self.class_separation));
        }
        if !(self.confusable_pair_gap > 0.0) || self.confusable_pair_gap > self.class_separation {
            return bad(format!(
                "confusable_pair_gap must lie in (0, class_separation], got {}",
                self.confusable_pair_gap
            ));
        }
        if !(self.domain_shift >= 0.0 && self.domain_shift.is_finite()) {
            return bad(format!("domain_shift must be non-negative, got {}", self.domain_shift));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticPair {
    /// Clean-labelled source domain.
    pub source: EmbeddingDataset,
    /// Target domain; its labels are ground truth for evaluation only.
    pub target: EmbeddingDataset,
    pub source_means: Matrix,
    pub target_means: Matrix,
    pub shift: Vec<f64>,
}

const PLACEMENT_RETRIES: usize = 1000;

fn random_direction(rng: &mut rng::Rng, dim: usize) -> Vec<f64> {
    loop {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        if normalize_in_place(&mut v) > 1e-12 {
            return v;
        }
    }
}

fn place_means(spec: &SyntheticSpec, rng: &mut rng::Rng) -> Result<Matrix> {
    let (c, d) = (spec.num_classes, spec.dim);
    let radius = spec.class_separation;
    let (a, b) = SyntheticSpec::CONFUSABLE_PAIR;
    // angle subtended by a chord of length `gap` on the sphere
    let half = spec.confusable_pair_gap / (2.0 * radius);
    let theta = 2.0 * half.min(1.0).asin();
    if d < 2 && (spec.confusable_pair_gap - 2.0 * radius).abs() > 1e-12 {
        return Err(Error::SeparationInfeasible {
            dim: d,
            reason: "a one-dimensional sphere admits only antipodal pairs".into(),
        });
    }
    for _ in 0..PLACEMENT_RETRIES {
        let mut means = Matrix::zeros(c, d);
        let u = random_direction(rng, d);
        // unit tangent orthogonal to u
        let t = if d >= 2 {
            let mut t = random_direction(rng, d);
            let proj: f64 = t.iter().zip(&u).map(|(x, y)| x * y).sum();
            t.iter_mut().zip(&u).for_each(|(x, y)| *x -= proj * y);
            if normalize_in_place(&mut t) < 1e-9 {
                continue;
            }
            t
        } else {
            vec![0.0; d]
        };
        for j in 0..d {
            means.set(a, j, radius * u[j]);
            let v = if d >= 2 {
                theta.cos() * u[j] + theta.sin() * t[j]
            } else {
                -u[j]
            };
            means.set(b, j, radius * v);
        }
        for k in (0..c).filter(|&k| k != a && k != b) {
            let v = random_direction(rng, d);
            means.row_mut(k).iter_mut().zip(&v).for_each(|(m, x)| *m = radius * x);
        }
        let ok = (0..c).all(|i| {
            (i + 1..c).all(|j| {
                let pair = (i == a && j == b) || (i == b && j == a);
                pair || crate::matrix::euclidean(means.row(i), means.row(j))
                    >= spec.class_separation
            })
        });
        if ok {
            return Ok(means);
        }
    }
    Err(Error::SeparationInfeasible {
        dim: d,
        reason: format!(
            "no placement of {c} means with separation {} found after {PLACEMENT_RETRIES} attempts",
            spec.class_separation
        ),
    })
}

fn sample_domain(
    means: &Matrix,
    per_class: usize,
    domain: Domain,
    rng: &mut rng::Rng,
) -> Result<EmbeddingDataset> {
    let (c, d) = (means.rows(), means.cols());
    let mut order: Vec<usize> = (0..c * per_class).map(|i| i / per_class).collect();
    order.shuffle(rng);
    let mut features = Matrix::zeros(order.len(), d);
    for (i, &k) in order.iter().enumerate() {
        for j in 0..d {
            let z: f64 = StandardNormal.sample(rng);
            features.set(i, j, means.get(k, j) + z);
        }
    }
    EmbeddingDataset::new(features, Some(order), c, domain)
}

/// Draws a clean source domain and a translated target domain.
pub fn generate_synthetic_pair(spec: &SyntheticSpec) -> Result<SyntheticPair> {
    spec.validate()?;
    let mut mean_rng = rng::stream(spec.seed, 1);
    let source_means = place_means(spec, &mut mean_rng)?;
    let mut shift_rng = rng::stream(spec.seed, 2);
    let shift: Vec<f64> = if spec.domain_shift > 0.0 {
        random_direction(&mut shift_rng, spec.dim)
            .into_iter()
            .map(|x| x * spec.domain_shift)
            .collect()
    } else {
        vec![0.0; spec.dim]
    };
    let mut target_means = source_means.clone();
    for k in 0..spec.num_classes {
        target_means.row_mut(k).iter_mut().zip(&shift).for_each(|(m, s)| *m += s);
    }
    debug_assert!((l2_norm(&shift) - spec.domain_shift).abs() < 1e-9);
    let source = sample_domain(
        &source_means,
        spec.samples_per_class_source,
        Domain::Source,
        &mut rng::stream(spec.seed, 3),
    )?;
    let target = sample_domain(
        &target_means,
        spec.samples_per_class_target,
        Domain::Target,
        &mut rng::stream(spec.seed, 4),
    )?;
    Ok(SyntheticPair {
        source,
        target,
        source_means,
        target_means,
        shift,
    })
}

// ---------------------------------------------------------------------------
// text format

/// `foo/target.emb` -> `foo/target.truth`
pub fn truth_path(path: &Path) -> PathBuf {
    path.with_extension("truth")
}

#[inline]
pub(crate) fn fmt_f64(v: f64) -> String {
    // 17 significant digits, enough for an exact round trip
    format!("{v:.16e}")
}

pub fn save_dataset(ds: &EmbeddingDataset, path: &Path) -> Result<()> {
    let labels = ds.labels();
    let mut out = String::new();
    let _ = writeln!(
        out,
        "#emb N={} D={} C={} LABELED={}",
        ds.len(),
        ds.dim(),
        ds.num_classes(),
        u8::from(labels.is_some())
    );
    for (i, row) in ds.features().iter_rows().enumerate() {
        let mut line = row.iter().map(|&v| fmt_f64(v)).collect::<Vec<_>>().join(" ");
        if let Some(l) = labels {
            let _ = write!(line, " {}", l[i]);
        }
        out.push_str(&line);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

struct Header {
    n: usize,
    d: usize,
    c: usize,
    labeled: bool,
}

fn parse_header(path: &Path, line: &str) -> Result<Header> {
    let mut fields = line.split_whitespace();
    if fields.next() != Some("#emb") {
        return Err(Error::parse(path, 1, "header must start with `#emb`"));
    }
    let (mut n, mut d, mut c, mut labeled) = (None, None, None, None);
    for f in fields {
        let (k, v) = f
            .split_once('=')
            .ok_or_else(|| Error::parse(path, 1, format!("malformed header field `{f}`")))?;
        let v: usize = v
            .parse()
            .map_err(|_| Error::parse(path, 1, format!("header field `{k}` is not an integer")))?;
        match k {
            "N" => n = Some(v),
            "D" => d = Some(v),
            "C" => c = Some(v),
            "LABELED" if v <= 1 => labeled = Some(v == 1),
            "LABELED" => return Err(Error::parse(path, 1, "LABELED must be 0 or 1")),
            _ => return Err(Error::parse(path, 1, format!("unknown header field `{k}`"))),
        }
    }
    match (n, d, c, labeled) {
        (Some(n), Some(d), Some(c), Some(labeled)) => Ok(Header { n, d, c, labeled }),
        _ => Err(Error::parse(path, 1, "header needs N, D, C and LABELED")),
    }
}

/// Reads the `#emb` text format. The domain is `Source` for labelled files
/// and `Target` otherwise.
pub fn load_dataset(path: &Path) -> Result<EmbeddingDataset> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mut lines = text.lines().enumerate();
    let (_, head) = lines.next().ok_or_else(|| Error::parse(path, 1, "empty file"))?;
    let h = parse_header(path, head)?;
    let width = h.d + usize::from(h.labeled);
    let mut data = Vec::with_capacity(h.n * h.d);
    let mut labels = Vec::with_capacity(if h.labeled { h.n } else { 0 });
    let mut rows = 0usize;
    for (idx, line) in lines {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        rows += 1;
        if rows > h.n {
            return Err(Error::parse(
                path,
                lineno,
                format!("more data rows than header N={}", h.n),
            ));
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != width {
            return Err(Error::parse(
                path,
                lineno,
                format!("row {} has {} fields, expected {width}", rows - 1, toks.len()),
            ));
        }
        for t in &toks[..h.d] {
            let v: f64 = t
                .parse()
                .map_err(|_| Error::parse(path, lineno, format!("bad number `{t}`")))?;
            if !v.is_finite() {
                return Err(Error::parse(path, lineno, format!("non-finite value `{t}`")));
            }
            data.push(v);
        }
        if h.labeled {
            let t = toks[h.d];
            let l: usize = t
                .parse()
                .map_err(|_| Error::parse(path, lineno, format!("bad label `{t}`")))?;
            if l >= h.c {
                return Err(Error::parse(
                    path,
                    lineno,
                    format!("row {}: label {l} out of range for C={}", rows - 1, h.c),
                ));
            }
            labels.push(l);
        }
    }
    if rows != h.n {
        return Err(Error::parse(
            path,
            1,
            format!("header N={} but file has {rows} data rows", h.n),
        ));
    }
    let features = Matrix::from_vec(h.n, h.d, data)?;
    let domain = if h.labeled { Domain::Source } else { Domain::Target };
    EmbeddingDataset::new(features, h.labeled.then_some(labels), h.c, domain)
}

pub fn save_truth(labels: &[usize], path: &Path) -> Result<()> {
    let mut out = String::with_capacity(labels.len() * 3);
    for l in labels {
        let _ = writeln!(out, "{l}");
    }
    fs::write(path, out).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Reads a truth sidecar and checks it against the dataset it belongs to.
pub fn load_truth(path: &Path, n: usize, num_classes: usize) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mut out = Vec::with_capacity(n);
    for (idx, line) in text.lines().enumerate() {
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        let l: usize = t
            .parse()
            .map_err(|_| Error::parse(path, idx + 1, format!("bad label `{t}`")))?;
        if l >= num_classes {
            return Err(Error::parse(
                path,
                idx + 1,
                format!("label {l} out of range for C={num_classes}"),
            ));
        }
        out.push(l);
    }
    if out.len() != n {
        return Err(Error::parse(
            path,
            1,
            format!("expected {n} labels, found {}", out.len()),
        ));
    }
    Ok(out)
}
