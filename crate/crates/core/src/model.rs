//! Feature extractor plus linear softmax head, trained with mini-batch SGD.
//!
//! The extractor is either the identity map or `tanh(x W1 + b1) W2 + b2`.
//! Gradients are derived by hand; `oracle::oracle_grad` checks them against
//! central finite differences.
//!
//! Mini-batch gradients are reduced with [`order_free_sum`], so a batch's
//! update does not depend on the order its samples arrive in. In particular a
//! full-batch trajectory is bit-identical under any row permutation.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{check_labels, fmt_f64};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ExtractorKind {
    Identity,
    Mlp { hidden: usize, embed_dim: usize },
}

impl Default for ExtractorKind {
    fn default() -> Self {
        ExtractorKind::Mlp {
            hidden: 64,
            embed_dim: 32,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub num_classes: usize,
    pub extractor: ExtractorKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Epochs run by [`Model::fit`]. The pipeline schedules its own epochs.
    pub epochs: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.05,
            batch_size: 64,
            epochs: 1,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be at least 1".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Extractor {
    Identity,
    Mlp {
        w1: Matrix,
        b1: Vec<f64>,
        w2: Matrix,
        b2: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    input_dim: usize,
    num_classes: usize,
    embed_dim: usize,
    extractor: Extractor,
    head_w: Matrix,
    head_b: Vec<f64>,
}

fn glorot(rows: usize, cols: usize, rng: &mut rng::Rng) -> Matrix {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-a..=a)).collect();
    Matrix::from_vec(rows, cols, data).expect("shape")
}

/// Sum that does not depend on the order of `values` (sorts them first).
pub fn order_free_sum(values: &mut [f64]) -> f64 {
    values.sort_unstable_by(f64::total_cmp);
    values.iter().sum()
}

struct Forward {
    hidden: Vec<f64>,
    embed: Vec<f64>,
    logits: Vec<f64>,
}

/// `log(sum(exp(logits)))` with max subtraction.
fn log_sum_exp(logits: &[f64]) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln()
}

impl Model {
    /// Fresh model with Glorot-uniform weights and zero biases.
    pub fn new(spec: &ModelSpec, seed: u64) -> Result<Self> {
        if spec.input_dim == 0 {
            return Err(Error::Config("input_dim must be at least 1".into()));
        }
        if spec.num_classes < 2 {
            return Err(Error::DegenerateClassCount(spec.num_classes));
        }
        let mut rng = rng::stream(seed, 0x696e_6974);
        let (extractor, embed_dim) = match spec.extractor {
            ExtractorKind::Identity => (Extractor::Identity, spec.input_dim),
            ExtractorKind::Mlp { hidden, embed_dim } => {
                if hidden == 0 || embed_dim == 0 {
                    return Err(Error::Config("hidden and embed_dim must be at least 1".into()));
                }
                let w1 = glorot(spec.input_dim, hidden, &mut rng);
                let w2 = glorot(hidden, embed_dim, &mut rng);
                (
                    Extractor::Mlp {
                        w1,
                        b1: vec![0.0; hidden],
                        w2,
                        b2: vec![0.0; embed_dim],
                    },
                    embed_dim,
                )
            }
        };
        let head_w = glorot(embed_dim, spec.num_classes, &mut rng);
        Ok(Model {
            input_dim: spec.input_dim,
            num_classes: spec.num_classes,
            embed_dim,
            extractor,
            head_w,
            head_b: vec![0.0; spec.num_classes],
        })
    }

    /// Identity extractor with the given `e x C` head.
    pub fn identity_with_head(head_w: Matrix, head_b: Vec<f64>) -> Result<Self> {
        if head_b.len() != head_w.cols() {
            return Err(Error::DimensionMismatch {
                expected: head_w.cols(),
                got: head_b.len(),
            });
        }
        Ok(Model {
            input_dim: head_w.rows(),
            num_classes: head_w.cols(),
            embed_dim: head_w.rows(),
            extractor: Extractor::Identity,
            head_w,
            head_b,
        })
    }

    pub fn spec(&self) -> ModelSpec {
        let extractor = match &self.extractor {
            Extractor::Identity => ExtractorKind::Identity,
            Extractor::Mlp { b1, .. } => ExtractorKind::Mlp {
                hidden: b1.len(),
                embed_dim: self.embed_dim,
            },
        };
        ModelSpec {
            input_dim: self.input_dim,
            num_classes: self.num_classes,
            extractor,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn blocks(&self) -> Vec<(&'static str, usize, usize, &[f64])> {
        let mut out = Vec::with_capacity(6);
        if let Extractor::Mlp { w1, b1, w2, b2 } = &self.extractor {
            out.push(("w1", w1.rows(), w1.cols(), w1.as_slice()));
            out.push(("b1", 1, b1.len(), b1.as_slice()));
            out.push(("w2", w2.rows(), w2.cols(), w2.as_slice()));
            out.push(("b2", 1, b2.len(), b2.as_slice()));
        }
        out.push(("head_w", self.head_w.rows(), self.head_w.cols(), self.head_w.as_slice()));
        out.push(("head_b", 1, self.head_b.len(), self.head_b.as_slice()));
        out
    }

    fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::with_capacity(6);
        if let Extractor::Mlp { w1, b1, w2, b2 } = &mut self.extractor {
            out.push(w1.as_mut_slice());
            out.push(b1.as_mut_slice());
            out.push(w2.as_mut_slice());
            out.push(b2.as_mut_slice());
        }
        out.push(self.head_w.as_mut_slice());
        out.push(self.head_b.as_mut_slice());
        out
    }

    pub fn num_params(&self) -> usize {
        self.blocks().iter().map(|b| b.3.len()).sum()
    }

    /// All parameters flattened in the order w1, b1, w2, b2, head_w, head_b.
    pub fn params(&self) -> Vec<f64> {
        self.blocks().iter().flat_map(|b| b.3.iter().copied()).collect()
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        let n = self.num_params();
        if flat.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: flat.len(),
            });
        }
        let mut off = 0;
        for block in self.blocks_mut() {
            block.copy_from_slice(&flat[off..off + block.len()]);
            off += block.len();
        }
        Ok(())
    }

    fn check_width(&self, xs: &Matrix) -> Result<()> {
        if xs.cols() != self.input_dim && xs.rows() > 0 {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim,
                got: xs.cols(),
            });
        }
        Ok(())
    }

    fn forward(&self, x: &[f64]) -> Forward {
        let (hidden, embed) = match &self.extractor {
            Extractor::Identity => (Vec::new(), x.to_vec()),
            Extractor::Mlp { w1, b1, w2, b2 } => {
                let mut h = b1.clone();
                for (i, xi) in x.iter().enumerate() {
                    for (hj, w) in h.iter_mut().zip(w1.row(i)) {
                        *hj += xi * w;
                    }
                }
                h.iter_mut().for_each(|v| *v = v.tanh());
                let mut z = b2.clone();
                for (i, hi) in h.iter().enumerate() {
                    for (zj, w) in z.iter_mut().zip(w2.row(i)) {
                        *zj += hi * w;
                    }
                }
                (h, z)
            }
        };
        let mut logits = self.head_b.clone();
        for (i, zi) in embed.iter().enumerate() {
            for (lj, w) in logits.iter_mut().zip(self.head_w.row(i)) {
                *lj += zi * w;
            }
        }
        Forward {
            hidden,
            embed,
            logits,
        }
    }

    /// Embeddings, one row per input row.
    pub fn embed(&self, xs: &Matrix) -> Result<Matrix> {
        self.check_width(xs)?;
        let mut out = Matrix::zeros(xs.rows(), self.embed_dim);
        for i in 0..xs.rows() {
            out.row_mut(i).copy_from_slice(&self.forward(xs.row(i)).embed);
        }
        Ok(out)
    }

    /// Head logits, `N x C`.
    pub fn predict_scores(&self, xs: &Matrix) -> Result<Matrix> {
        self.check_width(xs)?;
        let mut out = Matrix::zeros(xs.rows(), self.num_classes);
        for i in 0..xs.rows() {
            out.row_mut(i).copy_from_slice(&self.forward(xs.row(i)).logits);
        }
        Ok(out)
    }

    /// Argmax of the head logits, lowest index on ties.
    pub fn predict(&self, xs: &Matrix) -> Result<Vec<usize>> {
        let scores = self.predict_scores(xs)?;
        Ok(scores.iter_rows().map(argmax).collect())
    }

    /// Mean and per-sample cross-entropy of the head's softmax.
    pub fn cross_entropy(&self, xs: &Matrix, labels: &[usize]) -> Result<(f64, Vec<f64>)> {
        self.check_width(xs)?;
        if labels.len() != xs.rows() {
            return Err(Error::DimensionMismatch {
                expected: xs.rows(),
                got: labels.len(),
            });
        }
        check_labels(labels, self.num_classes)?;
        let per: Vec<f64> = (0..xs.rows())
            .map(|i| {
                let f = self.forward(xs.row(i));
                log_sum_exp(&f.logits) - f.logits[labels[i]]
            })
            .collect();
        let mean = if per.is_empty() {
            0.0
        } else {
            order_free_sum(&mut per.clone()) / per.len() as f64
        };
        Ok((mean, per))
    }

    /// Objective and gradient over the rows `idx`:
    /// mean cross-entropy plus `weight_decay * 0.5 * |params|^2`.
    pub fn loss_and_gradient(
        &self,
        xs: &Matrix,
        labels: &[usize],
        idx: &[usize],
        weight_decay: f64,
    ) -> Result<(f64, Vec<f64>)> {
        self.check_width(xs)?;
        check_labels(labels, self.num_classes)?;
        if let Some(&i) = idx.iter().find(|&&i| i >= xs.rows()) {
            return Err(Error::DimensionMismatch {
                expected: xs.rows(),
                got: i + 1,
            });
        }
        let (ce, grad) = self.batch_gradient(xs, labels, idx, weight_decay);
        let reg = 0.5 * weight_decay * self.params().iter().map(|w| w * w).sum::<f64>();
        Ok((ce + reg, grad))
    }

    /// Mean cross-entropy over `idx` and the gradient of the regularised
    /// objective. Inputs are assumed checked.
    fn batch_gradient(
        &self,
        xs: &Matrix,
        labels: &[usize],
        idx: &[usize],
        weight_decay: f64,
    ) -> (f64, Vec<f64>) {
        let p = self.num_params();
        let b = idx.len();
        // contributions laid out parameter-major so each reduction is contiguous
        let mut contrib = vec![0.0; p * b];
        let mut losses = Vec::with_capacity(b);
        let (c, e) = (self.num_classes, self.embed_dim);
        for (s, &i) in idx.iter().enumerate() {
            let x = xs.row(i);
            let f = self.forward(x);
            let lse = log_sum_exp(&f.logits);
            losses.push(lse - f.logits[labels[i]]);
            let mut g_logits: Vec<f64> = f.logits.iter().map(|l| (l - lse).exp()).collect();
            g_logits[labels[i]] -= 1.0;

            let mut off = 0;
            let mut put = |k: usize, v: f64| contrib[k * b + s] = v;
            if let Extractor::Mlp { w1, w2, .. } = &self.extractor {
                let h = f.hidden.len();
                let g_embed: Vec<f64> = (0..e)
                    .map(|r| {
                        self.head_w
                            .row(r)
                            .iter()
                            .zip(&g_logits)
                            .map(|(w, g)| w * g)
                            .sum()
                    })
                    .collect();
                let g_pre: Vec<f64> = (0..h)
                    .map(|r| {
                        let back: f64 = w2.row(r).iter().zip(&g_embed).map(|(w, g)| w * g).sum();
                        back * (1.0 - f.hidden[r] * f.hidden[r])
                    })
                    .collect();
                for (r, xr) in x.iter().enumerate().take(w1.rows()) {
                    for (j, g) in g_pre.iter().enumerate() {
                        put(off + r * h + j, xr * g);
                    }
                }
                off += w1.rows() * h;
                for (j, g) in g_pre.iter().enumerate() {
                    put(off + j, *g);
                }
                off += h;
                for (r, hr) in f.hidden.iter().enumerate() {
                    for (j, g) in g_embed.iter().enumerate() {
                        put(off + r * e + j, hr * g);
                    }
                }
                off += h * e;
                for (j, g) in g_embed.iter().enumerate() {
                    put(off + j, *g);
                }
                off += e;
            }
            for (r, zr) in f.embed.iter().enumerate() {
                for (j, g) in g_logits.iter().enumerate() {
                    put(off + r * c + j, zr * g);
                }
            }
            off += e * c;
            for (j, g) in g_logits.iter().enumerate() {
                put(off + j, *g);
            }
        }
        let params = self.params();
        let inv = if b == 0 { 0.0 } else { 1.0 / b as f64 };
        let grad: Vec<f64> = contrib
            .chunks_mut(b.max(1))
            .take(p)
            .zip(&params)
            .map(|(col, w)| {
                let g = if b == 0 { 0.0 } else { order_free_sum(col) * inv };
                g + weight_decay * w
            })
            .collect();
        let ce = if b == 0 {
            0.0
        } else {
            order_free_sum(&mut losses) * inv
        };
        (ce, grad)
    }

    /// One pass of mini-batch SGD over `xs`/`labels`. Batch order is a
    /// shuffle seeded by `(cfg.seed, epoch)`. Returns the mean per-sample
    /// cross-entropy seen during the epoch.
    pub fn train_epoch(
        mut self,
        xs: &Matrix,
        labels: &[usize],
        cfg: &TrainConfig,
        epoch: usize,
    ) -> Result<(Model, f64)> {
        cfg.validate()?;
        self.check_width(xs)?;
        if labels.len() != xs.rows() {
            return Err(Error::DimensionMismatch {
                expected: xs.rows(),
                got: labels.len(),
            });
        }
        check_labels(labels, self.num_classes)?;
        let n = xs.rows();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::stream(cfg.seed, 0x1000_0000 + epoch as u64));
        let mut batch_losses = Vec::new();
        for (bi, batch) in order.chunks(cfg.batch_size).enumerate() {
            let (mean_ce, grad) = self.batch_gradient(xs, labels, batch, cfg.weight_decay);
            if !mean_ce.is_finite() {
                return Err(Error::Diverged { epoch, batch: bi });
            }
            batch_losses.push(mean_ce * batch.len() as f64);
            let mut params = self.params();
            for (w, g) in params.iter_mut().zip(&grad) {
                *w -= cfg.learning_rate * g;
            }
            if params.iter().any(|w| !w.is_finite()) {
                return Err(Error::Diverged { epoch, batch: bi });
            }
            self.set_params(&params)?;
        }
        let mean = if n == 0 {
            0.0
        } else {
            order_free_sum(&mut batch_losses) / n as f64
        };
        Ok((self, mean))
    }

    /// Runs `cfg.epochs` epochs and returns the per-epoch mean losses.
    pub fn fit(self, xs: &Matrix, labels: &[usize], cfg: &TrainConfig) -> Result<(Model, Vec<f64>)> {
        let mut model = self;
        let mut history = Vec::with_capacity(cfg.epochs);
        for epoch in 0..cfg.epochs {
            let (m, loss) = model.train_epoch(xs, labels, cfg, epoch)?;
            model = m;
            history.push(loss);
        }
        Ok((model, history))
    }

    /// Writes the `#cpcmodel v1` checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::from("#cpcmodel v1\n");
        let _ = writeln!(out, "input_dim {}", self.input_dim);
        let _ = writeln!(out, "num_classes {}", self.num_classes);
        match self.spec().extractor {
            ExtractorKind::Identity => out.push_str("extractor identity\n"),
            ExtractorKind::Mlp { hidden, embed_dim } => {
                let _ = writeln!(out, "extractor mlp {hidden} {embed_dim}");
            }
        }
        for (name, rows, cols, data) in self.blocks() {
            let _ = writeln!(out, "param {name} {rows} {cols}");
            for r in 0..rows {
                let line: Vec<String> =
                    data[r * cols..(r + 1) * cols].iter().map(|&v| fmt_f64(v)).collect();
                out.push_str(&line.join(" "));
                out.push('\n');
            }
        }
        fs::write(path, out).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Model> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let mut next = |what: &str| {
            lines
                .next()
                .ok_or_else(|| Error::parse(path, 0, format!("unexpected end of file, wanted {what}")))
        };
        let (ln, head) = next("header")?;
        if head.trim() != "#cpcmodel v1" {
            return Err(Error::parse(path, ln, "expected `#cpcmodel v1` header"));
        }
        let field = |(ln, l): (usize, &str), key: &str| -> Result<Vec<usize>> {
            let mut it = l.split_whitespace();
            if it.next() != Some(key) {
                return Err(Error::parse(path, ln, format!("expected `{key}`")));
            }
            it.map(|t| {
                t.parse()
                    .map_err(|_| Error::parse(path, ln, format!("bad integer `{t}`")))
            })
            .collect()
        };
        let input_dim = *field(next("input_dim")?, "input_dim")?
            .first()
            .ok_or_else(|| Error::parse(path, 2, "missing input_dim"))?;
        let num_classes = *field(next("num_classes")?, "num_classes")?
            .first()
            .ok_or_else(|| Error::parse(path, 3, "missing num_classes"))?;
        let (ln, ex) = next("extractor")?;
        let toks: Vec<&str> = ex.split_whitespace().collect();
        let extractor = match toks.as_slice() {
            ["extractor", "identity"] => ExtractorKind::Identity,
            ["extractor", "mlp", h, e] => ExtractorKind::Mlp {
                hidden: h.parse().map_err(|_| Error::parse(path, ln, "bad hidden width"))?,
                embed_dim: e.parse().map_err(|_| Error::parse(path, ln, "bad embed dim"))?,
            },
            _ => return Err(Error::parse(path, ln, "bad extractor line")),
        };
        let mut model = Model::new(
            &ModelSpec {
                input_dim,
                num_classes,
                extractor,
            },
            0,
        )
        .map_err(|e| Error::parse(path, ln, e.to_string()))?;
        let expected: Vec<(&'static str, usize, usize)> =
            model.blocks().iter().map(|b| (b.0, b.1, b.2)).collect();
        let mut flat = Vec::with_capacity(model.num_params());
        for (name, rows, cols) in expected {
            let (ln, l) = next("param block")?;
            let want = format!("param {name} {rows} {cols}");
            if l.split_whitespace().collect::<Vec<_>>().join(" ") != want {
                return Err(Error::parse(path, ln, format!("expected `{want}`")));
            }
            for _ in 0..rows {
                let (ln, l) = next("parameter row")?;
                let vals: Vec<f64> = l
                    .split_whitespace()
                    .map(|t| {
                        t.parse::<f64>()
                            .ok()
                            .filter(|v| v.is_finite())
                            .ok_or_else(|| Error::parse(path, ln, format!("bad value `{t}`")))
                    })
                    .collect::<Result<_>>()?;
                if vals.len() != cols {
                    return Err(Error::parse(
                        path,
                        ln,
                        format!("expected {cols} values, got {}", vals.len()),
                    ));
                }
                flat.extend(vals);
            }
        }
        model.set_params(&flat)?;
        Ok(model)
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = k;
        }
    }
    best
}
