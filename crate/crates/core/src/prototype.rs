//! Class prototypes and target-domain refinement.
//!
//! Prototypes are unit-norm class means of L2-normalised embeddings, so the
//! dot product between an embedding and a prototype row is their cosine
//! similarity. A shared bank starts from the source prototypes and is
//! repeatedly averaged with trimmed target prototypes built from the
//! current pseudo-labels.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{check_labels, fmt_f64, noise_rate};
use crate::error::{Error, Result};
use crate::matrix::{dot, euclidean, normalize_in_place, Matrix};
use crate::model::Model;

/// Rows whose pre-normalisation norm falls below this are flagged invalid.
const DEGENERATE_NORM: f64 = 1e-12;

/// `C x e` matrix of unit-norm prototypes with a validity flag per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeBank {
    vectors: Matrix,
    counts: Vec<usize>,
    valid: Vec<bool>,
}

impl PrototypeBank {
    pub fn num_classes(&self) -> usize {
        self.vectors.rows()
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn vectors(&self) -> &Matrix {
        &self.vectors
    }

    pub fn row(&self, k: usize) -> &[f64] {
        self.vectors.row(k)
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn is_valid(&self, k: usize) -> bool {
        self.valid[k]
    }

    pub fn num_valid(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    /// Bank from explicit rows. Rows are normalised; zero rows become invalid.
    pub fn from_rows(rows: Matrix) -> Self {
        let mut vectors = rows;
        let valid = (0..vectors.rows())
            .map(|k| normalize_in_place(vectors.row_mut(k)) > DEGENERATE_NORM)
            .collect::<Vec<_>>();
        for (k, ok) in valid.iter().enumerate() {
            if !ok {
                vectors.row_mut(k).fill(0.0);
            }
        }
        let counts = vec![0; vectors.rows()];
        PrototypeBank {
            vectors,
            counts,
            valid,
        }
    }

    /// `N x C` cosine similarities; invalid classes score `-inf`.
    pub fn similarities(&self, embeddings: &Matrix) -> Result<Matrix> {
        self.check_dim(embeddings)?;
        let c = self.num_classes();
        let mut out = Matrix::zeros(embeddings.rows(), c);
        for (i, x) in embeddings.iter_rows().enumerate() {
            for k in 0..c {
                let s = if self.valid[k] {
                    dot(x, self.row(k))
                } else {
                    f64::NEG_INFINITY
                };
                out.set(i, k, s);
            }
        }
        Ok(out)
    }

    fn check_dim(&self, embeddings: &Matrix) -> Result<()> {
        if embeddings.rows() > 0 && embeddings.cols() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: embeddings.cols(),
            });
        }
        Ok(())
    }

    /// Writes the `#cpcproto v1` debug dump: one row per class, followed by
    /// a 1/0 validity flag.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        let _ = writeln!(out, "#cpcproto v1 C={} E={}", self.num_classes(), self.dim());
        for k in 0..self.num_classes() {
            let mut line: Vec<String> = self.row(k).iter().map(|&v| fmt_f64(v)).collect();
            line.push(u8::from(self.valid[k]).to_string());
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }
}

/// Sample indices per class, ascending.
fn members_by_class(labels: &[usize], num_classes: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        out[l].push(i);
    }
    out
}

/// Normalised mean of `rows`, summed in the order given.
fn normalized_mean(embeddings: &Matrix, rows: &[usize], out: &mut [f64]) -> bool {
    out.fill(0.0);
    if rows.is_empty() {
        return false;
    }
    for &i in rows {
        for (o, x) in out.iter_mut().zip(embeddings.row(i)) {
            *o += x;
        }
    }
    let n = rows.len() as f64;
    out.iter_mut().for_each(|o| *o /= n);
    let norm = normalize_in_place(out);
    if norm > DEGENERATE_NORM && norm.is_finite() {
        true
    } else {
        out.fill(0.0);
        false
    }
}

fn check_inputs(embeddings: &Matrix, labels: &[usize], num_classes: usize) -> Result<()> {
    if labels.len() != embeddings.rows() {
        return Err(Error::DimensionMismatch {
            expected: embeddings.rows(),
            got: labels.len(),
        });
    }
    check_labels(labels, num_classes)
}

fn bank_from_members(embeddings: &Matrix, members: &[Vec<usize>]) -> PrototypeBank {
    let c = members.len();
    let mut vectors = Matrix::zeros(c, embeddings.cols());
    let mut valid = vec![false; c];
    for (k, rows) in members.iter().enumerate() {
        valid[k] = normalized_mean(embeddings, rows, vectors.row_mut(k));
    }
    PrototypeBank {
        vectors,
        counts: members.iter().map(Vec::len).collect(),
        valid,
    }
}

/// Per-class mean embedding, normalised. Empty or zero-mean classes are
/// flagged invalid rather than rejected.
pub fn class_prototypes(
    embeddings: &Matrix,
    labels: &[usize],
    num_classes: usize,
) -> Result<PrototypeBank> {
    check_inputs(embeddings, labels, num_classes)?;
    Ok(bank_from_members(embeddings, &members_by_class(labels, num_classes)))
}

/// Assigns each row to the valid prototype with the highest dot product.
/// Ties go to the lowest class index. Returns labels and the winning scores.
pub fn pseudo_label(embeddings: &Matrix, bank: &PrototypeBank) -> Result<(Vec<usize>, Vec<f64>)> {
    if bank.num_valid() == 0 {
        return Err(Error::NoValidPrototype);
    }
    bank.check_dim(embeddings)?;
    let mut labels = Vec::with_capacity(embeddings.rows());
    let mut scores = Vec::with_capacity(embeddings.rows());
    for x in embeddings.iter_rows() {
        let mut best: Option<(usize, f64)> = None;
        for k in (0..bank.num_classes()).filter(|&k| bank.valid[k]) {
            let s = dot(x, bank.row(k));
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((k, s));
            }
        }
        let (k, s) = best.expect("at least one valid class");
        labels.push(k);
        scores.push(s);
    }
    Ok((labels, scores))
}

/// Row-wise `normalize((shared + incoming) / 2)`. A class valid on only one
/// side copies that side; invalid on both stays invalid.
pub fn merge_prototypes(shared: &PrototypeBank, incoming: &PrototypeBank) -> Result<PrototypeBank> {
    if shared.num_classes() != incoming.num_classes() {
        return Err(Error::DimensionMismatch {
            expected: shared.num_classes(),
            got: incoming.num_classes(),
        });
    }
    if shared.dim() != incoming.dim() {
        return Err(Error::DimensionMismatch {
            expected: shared.dim(),
            got: incoming.dim(),
        });
    }
    let mut out = shared.clone();
    for k in 0..shared.num_classes() {
        out.counts[k] = shared.counts[k] + incoming.counts[k];
        match (shared.valid[k], incoming.valid[k]) {
            (true, true) => {
                let row = out.vectors.row_mut(k);
                for (o, b) in row.iter_mut().zip(incoming.row(k)) {
                    *o = (*o + b) / 2.0;
                }
                // antipodal rows cancel; keep the shared row then
                if normalize_in_place(row) <= DEGENERATE_NORM {
                    row.copy_from_slice(shared.row(k));
                }
            }
            (false, true) => {
                out.vectors.row_mut(k).copy_from_slice(incoming.row(k));
                out.valid[k] = true;
            }
            _ => {}
        }
    }
    Ok(out)
}

/// Number of members kept out of `n` at keep-fraction `tau`: `max(1, floor(tau * n))`.
///
/// A relative slack of 1e-9 absorbs products like `0.57 * 100 = 56.999...`.
pub fn keep_count(n: usize, tau: f64) -> usize {
    if n == 0 {
        return 0;
    }
    let raw = (tau * n as f64 * (1.0 + 1e-9)).floor() as usize;
    raw.clamp(1, n)
}

/// For each class, the indices of the members kept by trimming, ascending.
///
/// Members are ranked by Euclidean distance to their class prototype (stable,
/// so equal distances keep index order) and the closest `keep_count` survive.
/// Classes whose current prototype is invalid keep every member.
pub fn trim_kept_indices(
    embeddings: &Matrix,
    labels: &[usize],
    bank: &PrototypeBank,
    tau: f64,
) -> Result<Vec<Vec<usize>>> {
    check_tau(tau)?;
    check_inputs(embeddings, labels, bank.num_classes())?;
    bank.check_dim(embeddings)?;
    let members = members_by_class(labels, bank.num_classes());
    Ok(members
        .into_iter()
        .enumerate()
        .map(|(k, rows)| {
            if !bank.valid[k] || rows.is_empty() {
                return rows;
            }
            let proto = bank.row(k);
            let mut ranked: Vec<(f64, usize)> = rows
                .iter()
                .map(|&i| (euclidean(embeddings.row(i), proto), i))
                .collect();
            ranked.sort_by(|a, b| a.0.total_cmp(&b.0));
            let mut kept: Vec<usize> = ranked[..keep_count(rows.len(), tau)]
                .iter()
                .map(|&(_, i)| i)
                .collect();
            kept.sort_unstable();
            kept
        })
        .collect())
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau <= 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("tau must lie in (0, 1], got {tau}")))
    }
}

/// De-noised prototypes: per class, the mean over the members closest to the
/// current prototype. `tau = 1` reproduces [`class_prototypes`] bit for bit.
pub fn trim_and_recompute(
    embeddings: &Matrix,
    labels: &[usize],
    bank: &PrototypeBank,
    tau: f64,
) -> Result<PrototypeBank> {
    let kept = trim_kept_indices(embeddings, labels, bank, tau)?;
    Ok(bank_from_members(embeddings, &kept))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementConfig {
    /// Fraction of each class kept when de-noising prototypes.
    pub tau: f64,
    /// Refinement iterations per call.
    pub refine_iters: usize,
    /// When false, trimming is skipped (equivalent to `tau = 1`).
    pub enable_trim: bool,
    /// Trim the source bank as well as the target banks.
    pub trim_source: bool,
    /// Reset the shared bank to the source bank at every iteration.
    pub reinit_every_iter: bool,
}

impl Default for RefinementConfig {
    fn default() -> Self {
        RefinementConfig {
            tau: 0.8,
            refine_iters: 3,
            enable_trim: true,
            trim_source: true,
            reinit_every_iter: false,
        }
    }
}

impl RefinementConfig {
    pub fn validate(&self) -> Result<()> {
        check_tau(self.tau)?;
        if self.refine_iters == 0 {
            return Err(Error::Config("refine_iters must be at least 1".into()));
        }
        Ok(())
    }

    fn effective_tau(&self) -> Option<f64> {
        (self.enable_trim && self.tau < 1.0).then_some(self.tau)
    }
}

/// How the shared bank is seeded for a refinement call.
#[derive(Debug, Clone, Copy, Default)]
pub enum RefineStart<'a> {
    /// Start from the (optionally trimmed) source prototypes.
    #[default]
    SourceBank,
    /// Continue from an existing shared bank.
    Bank(&'a PrototypeBank),
    /// Start from the source prototypes, but build the first target bank
    /// from these labels instead of pseudo-labelling.
    SeedLabels(&'a [usize]),
}

#[derive(Debug, Clone)]
pub struct Refinement {
    pub labels: Vec<usize>,
    /// Cosine similarity of each target embedding to its assigned prototype.
    pub scores: Vec<f64>,
    pub bank: PrototypeBank,
    /// L2-normalised target embeddings the labels were computed from.
    pub target_embeddings: Matrix,
}

/// Source prototypes under `model`, trimmed when configured.
pub fn source_bank(
    model: &Model,
    source: &Matrix,
    source_labels: &[usize],
    cfg: &RefinementConfig,
) -> Result<PrototypeBank> {
    let emb = model.embed(source)?.l2_normalized_rows();
    let bank = class_prototypes(&emb, source_labels, model.num_classes())?;
    match cfg.effective_tau() {
        Some(tau) if cfg.trim_source => trim_and_recompute(&emb, source_labels, &bank, tau),
        _ => Ok(bank),
    }
}

/// Pseudo-labels the target domain with a shared prototype bank refined over
/// `cfg.refine_iters` iterations. The model is not updated.
///
/// The target is passed as bare features: refinement has no access to target
/// labels.
pub fn refine_target(
    model: &Model,
    source: &Matrix,
    source_labels: &[usize],
    target: &Matrix,
    cfg: &RefinementConfig,
) -> Result<Refinement> {
    refine_target_from(model, source, source_labels, target, cfg, RefineStart::SourceBank)
}

pub fn refine_target_from(
    model: &Model,
    source: &Matrix,
    source_labels: &[usize],
    target: &Matrix,
    cfg: &RefinementConfig,
    start: RefineStart<'_>,
) -> Result<Refinement> {
    cfg.validate()?;
    let c = model.num_classes();
    let src_bank = source_bank(model, source, source_labels, cfg)?;
    let emb = model.embed(target)?.l2_normalized_rows();
    let mut shared = match start {
        RefineStart::Bank(b) => b.clone(),
        _ => src_bank.clone(),
    };
    for m in 0..cfg.refine_iters {
        if cfg.reinit_every_iter {
            shared = src_bank.clone();
        }
        let labels = match start {
            RefineStart::SeedLabels(seed) if m == 0 => {
                check_inputs(&emb, seed, c)?;
                seed.to_vec()
            }
            _ => pseudo_label(&emb, &shared)?.0,
        };
        let mut target_bank = class_prototypes(&emb, &labels, c)?;
        if let Some(tau) = cfg.effective_tau() {
            target_bank = trim_and_recompute(&emb, &labels, &target_bank, tau)?;
        }
        shared = merge_prototypes(&shared, &target_bank)?;
    }
    let (labels, scores) = pseudo_label(&emb, &shared)?;
    Ok(Refinement {
        labels,
        scores,
        bank: shared,
        target_embeddings: emb,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SourceRefinement {
    pub labels: Vec<usize>,
    /// Indices whose label was reassigned.
    pub changed: Vec<usize>,
    pub noise_before: Option<f64>,
    pub noise_after: Option<f64>,
}

/// Relabels the source domain with its own prototypes: build the bank from
/// the given (noisy) labels, then reassign every sample to its nearest
/// prototype. `truth` is only read for the noise-rate report.
pub fn refine_source_labels(
    model: &Model,
    source: &Matrix,
    labels: &[usize],
    truth: Option<&[usize]>,
) -> Result<SourceRefinement> {
    let emb = model.embed(source)?.l2_normalized_rows();
    let bank = class_prototypes(&emb, labels, model.num_classes())?;
    let (relabeled, _) = pseudo_label(&emb, &bank)?;
    let changed = relabeled
        .iter()
        .zip(labels)
        .enumerate()
        .filter(|(_, (a, b))| a != b)
        .map(|(i, _)| i)
        .collect();
    let (noise_before, noise_after) = match truth {
        Some(t) => (Some(noise_rate(labels, t)), Some(noise_rate(&relabeled, t))),
        None => (None, None),
    };
    Ok(SourceRefinement {
        labels: relabeled,
        changed,
        noise_before,
        noise_after,
    })
}
