//! Softmax-linear classifier trained by mini-batch gradient descent.
//!
//! The model exposes exactly what the detectors consume: per-example losses
//! and class probabilities. Three losses are supported, all on the softmax
//! output `p`:
//!
//! - `Plain`: `-ln p[y]`;
//! - `Smoothed(eps)`: cross-entropy against `(1 - eps) onehot(y) + eps / k`;
//! - `NtmCorrected(T)`: `-ln q[y]` with `q` the clamped, renormalized
//!   `p · T_inv`.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::correction::{smooth_labels, TransitionMatrix, ADJUST_FLOOR};
use crate::datamodel::Corpus;
use crate::numeric::{fmt17, log_sum_exp};
use crate::{rng, Error, Result};

const INIT_SCALE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    /// k rows of length dim.
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

impl LinearModel {
    pub fn zeros(k: usize, dim: usize) -> Self {
        LinearModel {
            weights: vec![vec![0.0; dim]; k],
            bias: vec![0.0; k],
        }
    }

    /// Weights i.i.d. uniform in [-0.01, 0.01], zero bias.
    pub fn init(k: usize, dim: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, "linear-init");
        let weights = (0..k)
            .map(|_| {
                (0..dim)
                    .map(|_| r.random_range(-INIT_SCALE..=INIT_SCALE))
                    .collect()
            })
            .collect();
        LinearModel {
            weights,
            bias: vec![0.0; k],
        }
    }

    pub fn k(&self) -> usize {
        self.bias.len()
    }

    pub fn dim(&self) -> usize {
        self.weights.first().map_or(0, Vec::len)
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.bias)
            .map(|(w, b)| b + w.iter().zip(x).map(|(wi, xi)| wi * xi).sum::<f64>())
            .collect()
    }

    pub fn proba(&self, x: &[f64]) -> Vec<f64> {
        softmax(&self.logits(x))
    }

    fn is_finite(&self) -> bool {
        self.bias.iter().chain(self.weights.iter().flatten()).all(|v| v.is_finite())
    }

    /// Plain-text checkpoint: `k dim`, then k weight rows, then the bias row.
    pub fn to_text(&self) -> String {
        let mut s = format!("{} {}\n", self.k(), self.dim());
        for row in self.weights.iter().chain(std::iter::once(&self.bias)) {
            let line: Vec<String> = row.iter().map(|&v| fmt17(v)).collect();
            writeln!(s, "{}", line.join(" ")).unwrap();
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let parse_err = |line: usize, m: &str| Error::Parse {
            line: line + 1,
            message: m.to_owned(),
        };
        let (hl, header) = lines.next().ok_or_else(|| parse_err(0, "empty checkpoint"))?;
        let dims: Vec<usize> = header
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| parse_err(hl, "header must be `k dim`"))?;
        let [k, dim] = dims[..] else {
            return Err(parse_err(hl, "header must be `k dim`"));
        };
        let mut rows = Vec::with_capacity(k + 1);
        for _ in 0..=k {
            let (li, line) = lines.next().ok_or_else(|| parse_err(hl, "truncated checkpoint"))?;
            let row: Vec<f64> = line
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| parse_err(li, "bad number"))?;
            let want = if rows.len() < k { dim } else { k };
            if row.len() != want {
                return Err(parse_err(li, &format!("expected {want} values")));
            }
            rows.push(row);
        }
        let bias = rows.pop().expect("k + 1 rows read");
        let model = LinearModel { weights: rows, bias };
        if !model.is_finite() {
            return Err(Error::invalid("checkpoint holds non-finite parameters"));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(z);
    z.iter().map(|v| (v - lse).exp()).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub enum LossMode {
    Plain,
    Smoothed(f64),
    NtmCorrected(TransitionMatrix),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub loss_mode: LossMode,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 64,
            learning_rate: 0.1,
            seed: 0,
            loss_mode: LossMode::Plain,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch_size must be at least 1"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be finite and non-negative"));
        }
        if let LossMode::Smoothed(eps) = self.loss_mode {
            if !(0.0..=0.2).contains(&eps) {
                return Err(Error::invalid("smoothing factor must lie in [0, 0.2]"));
            }
        }
        Ok(())
    }
}

/// End-of-epoch losses for every corpus example, one row per epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochTrace {
    pub losses: Vec<Vec<f64>>,
}

/// Loss of one example and its gradient with respect to the logits.
pub fn loss_and_logit_grad(model: &LinearModel, x: &[f64], label: u8, mode: &LossMode) -> (f64, Vec<f64>) {
    let z = model.logits(x);
    let lse = log_sum_exp(&z);
    let p: Vec<f64> = z.iter().map(|v| (v - lse).exp()).collect();
    let y = usize::from(label);
    let k = p.len();
    match mode {
        LossMode::Plain => {
            let mut g = p;
            g[y] -= 1.0;
            (lse - z[y], g)
        }
        LossMode::Smoothed(eps) => {
            let target = smooth_labels(label, *eps, k);
            let loss = target.iter().zip(&z).map(|(t, zi)| t * (lse - zi)).sum();
            let g = p.iter().zip(&target).map(|(pi, ti)| pi - ti).collect();
            (loss, g)
        }
        LossMode::NtmCorrected(tm) => {
            let t_inv = tm.t_inv();
            let a: Vec<f64> = (0..k)
                .map(|j| (0..k).map(|i| p[i] * t_inv[i][j]).sum())
                .collect();
            let c: Vec<f64> = a.iter().map(|v| v.clamp(ADJUST_FLOOR, 1.0)).collect();
            let s: f64 = c.iter().sum();
            let loss = s.ln() - c[y].ln();
            // dL/da through the clamp, then back through p·T_inv and the softmax.
            let da: Vec<f64> = (0..k)
                .map(|j| {
                    let dc = 1.0 / s - if j == y { 1.0 / c[y] } else { 0.0 };
                    if (ADJUST_FLOOR..=1.0).contains(&a[j]) { dc } else { 0.0 }
                })
                .collect();
            let dp: Vec<f64> = (0..k)
                .map(|i| (0..k).map(|j| t_inv[i][j] * da[j]).sum())
                .collect();
            let dot: f64 = p.iter().zip(&dp).map(|(pi, gi)| pi * gi).sum();
            let g = p.iter().zip(&dp).map(|(pi, gi)| pi * (gi - dot)).collect();
            (loss, g)
        }
    }
}

pub fn example_loss(model: &LinearModel, x: &[f64], label: u8, mode: &LossMode) -> f64 {
    loss_and_logit_grad(model, x, label, mode).0
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

/// Mean loss over `batch` and its gradient with respect to the parameters.
pub fn batch_gradient(model: &LinearModel, corpus: &Corpus, batch: &[usize], mode: &LossMode) -> (f64, Gradient) {
    let mut grad = Gradient {
        weights: vec![vec![0.0; model.dim()]; model.k()],
        bias: vec![0.0; model.k()],
    };
    let mut total = 0.0;
    let scale = 1.0 / batch.len() as f64;
    for &i in batch {
        let ex = &corpus.examples()[i];
        let (loss, g) = loss_and_logit_grad(model, &ex.features, ex.label, mode);
        total += loss;
        for (c, gc) in g.iter().enumerate() {
            grad.bias[c] += gc * scale;
            for (w, x) in grad.weights[c].iter_mut().zip(&ex.features) {
                *w += gc * x * scale;
            }
        }
    }
    (total * scale, grad)
}

pub fn batch_loss(model: &LinearModel, corpus: &Corpus, batch: &[usize], mode: &LossMode) -> f64 {
    batch
        .iter()
        .map(|&i| {
            let ex = &corpus.examples()[i];
            example_loss(model, &ex.features, ex.label, mode)
        })
        .sum::<f64>()
        / batch.len() as f64
}

/// One gradient step on `batch`.
pub(crate) fn sgd_step(
    model: &mut LinearModel,
    corpus: &Corpus,
    batch: &[usize],
    mode: &LossMode,
    lr: f64,
    epoch: usize,
    batch_no: usize,
) -> Result<()> {
    let (_, g) = batch_gradient(model, corpus, batch, mode);
    let finite = g.bias.iter().chain(g.weights.iter().flatten()).all(|v| v.is_finite());
    if !finite {
        return Err(Error::NonFiniteGradient {
            epoch,
            batch: batch_no,
        });
    }
    for (row, grow) in model.weights.iter_mut().zip(&g.weights) {
        for (w, gw) in row.iter_mut().zip(grow) {
            *w -= lr * gw;
        }
    }
    for (b, gb) in model.bias.iter_mut().zip(&g.bias) {
        *b -= lr * gb;
    }
    Ok(())
}

pub(crate) fn check_trainable(corpus: &Corpus, indices: &[usize]) -> Result<()> {
    if indices.is_empty() {
        return Err(Error::invalid("no examples to train on"));
    }
    let first = corpus.examples()[indices[0]].label;
    if indices.iter().all(|&i| corpus.examples()[i].label == first) {
        return Err(Error::SingleClass);
    }
    Ok(())
}

/// Trains on the examples selected by `include_mask` (all when `None`). The
/// trace still scores every corpus example after each epoch.
pub fn train(corpus: &Corpus, config: &TrainConfig, include_mask: Option<&[bool]>) -> Result<(LinearModel, EpochTrace)> {
    config.validate()?;
    let mut indices: Vec<usize> = match include_mask {
        Some(mask) => {
            if mask.len() != corpus.len() {
                return Err(Error::DimensionMismatch {
                    expected: corpus.len(),
                    got: mask.len(),
                });
            }
            (0..corpus.len()).filter(|&i| mask[i]).collect()
        }
        None => (0..corpus.len()).collect(),
    };
    check_trainable(corpus, &indices)?;
    let mut model = LinearModel::init(2, corpus.dim(), config.seed);
    let mut order_rng = rng::stream(config.seed, "batch-order");
    let mut trace = EpochTrace {
        losses: Vec::with_capacity(config.epochs),
    };
    for epoch in 0..config.epochs {
        if config.shuffle {
            indices.shuffle(&mut order_rng);
        }
        for (b, batch) in indices.chunks(config.batch_size).enumerate() {
            sgd_step(&mut model, corpus, batch, &config.loss_mode, config.learning_rate, epoch, b)?;
        }
        trace.losses.push(per_example_loss(&model, corpus, &config.loss_mode)?);
    }
    Ok((model, trace))
}

fn check_dim(model: &LinearModel, corpus: &Corpus) -> Result<()> {
    if model.dim() != corpus.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            got: corpus.dim(),
        });
    }
    Ok(())
}

pub fn predict_proba(model: &LinearModel, corpus: &Corpus) -> Result<Vec<Vec<f64>>> {
    check_dim(model, corpus)?;
    Ok(corpus.examples().iter().map(|e| model.proba(&e.features)).collect())
}

pub fn per_example_loss(model: &LinearModel, corpus: &Corpus, mode: &LossMode) -> Result<Vec<f64>> {
    check_dim(model, corpus)?;
    Ok(corpus
        .examples()
        .iter()
        .map(|e| example_loss(model, &e.features, e.label, mode))
        .collect())
}
