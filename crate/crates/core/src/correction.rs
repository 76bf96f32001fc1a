//! Corrections that keep every example: backward correction through a noise
//! transition matrix, and label smoothing with a rejection threshold.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;

use crate::datamodel::Corpus;
use crate::numeric::{argmax, fmt17};
use crate::trainer::{predict_proba, train, LossMode, TrainConfig};
use crate::verdict::{verdicts_from, NoiseVerdict};
use crate::{Error, Result};

/// Lower clamp applied to corrected probabilities before renormalization.
pub const ADJUST_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatrixSource {
    Estimated,
    Given,
}

/// Row-stochastic `T[i][j] = P(observed = j | true = i)` with its inverse.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    t: Vec<Vec<f64>>,
    t_inv: Vec<Vec<f64>>,
    source: MatrixSource,
}

impl TransitionMatrix {
    pub fn new(t: Vec<Vec<f64>>, source: MatrixSource) -> Result<Self> {
        let k = t.len();
        if k == 0 || t.iter().any(|r| r.len() != k) {
            return Err(Error::invalid("transition matrix must be square and nonempty"));
        }
        for row in &t {
            if row.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::invalid("transition probabilities must lie in [0, 1]"));
            }
            if (row.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(Error::invalid("transition matrix rows must sum to 1"));
            }
        }
        let m = DMatrix::from_fn(k, k, |i, j| t[i][j]);
        let inv = m.clone().try_inverse().ok_or(Error::Singular)?;
        let residual = (&m * &inv - DMatrix::identity(k, k)).abs().max();
        if !residual.is_finite() || residual > 1e-6 {
            return Err(Error::Singular);
        }
        let t_inv = (0..k).map(|i| (0..k).map(|j| inv[(i, j)]).collect()).collect();
        Ok(TransitionMatrix { t, t_inv, source })
    }

    pub fn identity(k: usize) -> Self {
        let t = (0..k)
            .map(|i| (0..k).map(|j| f64::from(u8::from(i == j))).collect())
            .collect();
        Self::new(t, MatrixSource::Given).expect("identity is invertible")
    }

    /// Two-class matrix flipping either label with probability `rate`.
    pub fn symmetric(rate: f64) -> Result<Self> {
        Self::new(vec![vec![1.0 - rate, rate], vec![rate, 1.0 - rate]], MatrixSource::Given)
    }

    pub fn t(&self) -> &[Vec<f64>] {
        &self.t
    }

    pub fn t_inv(&self) -> &[Vec<f64>] {
        &self.t_inv
    }

    pub fn k(&self) -> usize {
        self.t.len()
    }

    pub fn source(&self) -> MatrixSource {
        self.source
    }

    /// Source tag line followed by the rows of `T`.
    pub fn to_text(&self) -> String {
        let mut s = match self.source {
            MatrixSource::Estimated => "estimated\n".to_owned(),
            MatrixSource::Given => "given\n".to_owned(),
        };
        for row in &self.t {
            let vals: Vec<String> = row.iter().map(|&v| fmt17(v)).collect();
            writeln!(s, "{}", vals.join(" ")).unwrap();
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let source = match lines.next().map(str::trim) {
            Some("estimated") => MatrixSource::Estimated,
            Some("given") => MatrixSource::Given,
            other => {
                return Err(Error::Parse {
                    line: 1,
                    message: format!("expected source tag, got {other:?}"),
                })
            }
        };
        let rows = lines
            .enumerate()
            .map(|(i, l)| {
                l.split_whitespace()
                    .map(str::parse)
                    .collect::<std::result::Result<Vec<f64>, _>>()
                    .map_err(|e| Error::Parse {
                        line: i + 2,
                        message: e.to_string(),
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(rows, source)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

/// Estimates `T` treating flagged examples as carrying the opposite of their
/// observed label. Counts get add-one smoothing before row normalization.
pub fn estimate_transition(corpus: &Corpus, flags: &[bool]) -> Result<TransitionMatrix> {
    if flags.len() != corpus.len() {
        return Err(Error::DimensionMismatch {
            expected: corpus.len(),
            got: flags.len(),
        });
    }
    if corpus.class_counts().contains(&0) {
        return Err(Error::invalid("each observed class needs at least one example"));
    }
    let mut counts = [[1.0f64; 2]; 2];
    for (ex, &flag) in corpus.examples().iter().zip(flags) {
        let observed = usize::from(ex.label);
        let truth = if flag { 1 - observed } else { observed };
        counts[truth][observed] += 1.0;
    }
    let t = counts
        .iter()
        .map(|row| {
            let total: f64 = row.iter().sum();
            row.iter().map(|c| c / total).collect()
        })
        .collect();
    TransitionMatrix::new(t, MatrixSource::Estimated)
}

/// `P_hat · T_inv`, clamped to [1e-12, 1] and renormalized per row.
pub fn adjust_probabilities(p_hat: &[Vec<f64>], t_inv: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let k = t_inv.len();
    if t_inv.iter().any(|r| r.len() != k) {
        return Err(Error::invalid("T_inv must be square"));
    }
    p_hat
        .iter()
        .map(|row| {
            if row.len() != k {
                return Err(Error::DimensionMismatch {
                    expected: k,
                    got: row.len(),
                });
            }
            let adj: Vec<f64> = (0..k)
                .map(|j| {
                    let v: f64 = (0..k).map(|i| row[i] * t_inv[i][j]).sum();
                    v.clamp(ADJUST_FLOOR, 1.0)
                })
                .collect();
            let s: f64 = adj.iter().sum();
            Ok(adj.into_iter().map(|v| v / s).collect())
        })
        .collect()
}

/// `(1 - eps) · onehot(label) + eps / k`.
pub fn smooth_labels(label: u8, eps: f64, k: usize) -> Vec<f64> {
    let y = usize::from(label);
    let off = eps / k as f64;
    // 1 - eps + eps/k as a single subtraction.
    let on = 1.0 - eps * (k - 1) as f64 / k as f64;
    (0..k).map(|j| if j == y { on } else { off }).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothingConfig {
    /// Smoothing factor; 0.1 by default.
    pub epsilon: f64,
    pub k: usize,
    /// Rejection threshold on the observed label's probability; 0.70 by default.
    pub tau: f64,
}

impl Default for SmoothingConfig {
    fn default() -> Self {
        SmoothingConfig {
            epsilon: 0.1,
            k: 2,
            tau: 0.70,
        }
    }
}

impl SmoothingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=0.2).contains(&self.epsilon) {
            return Err(Error::invalid("epsilon must lie in [0, 0.2]"));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::invalid("tau must lie in [0, 1]"));
        }
        if self.k != 2 {
            return Err(Error::invalid("only two classes are supported"));
        }
        Ok(())
    }
}

/// Trains with smoothed targets and flags examples whose observed label gets
/// probability below `tau`. Score is one minus that probability.
pub fn ls_detect(corpus: &Corpus, cfg: &SmoothingConfig, trainer: &TrainConfig) -> Result<Vec<NoiseVerdict>> {
    cfg.validate()?;
    let tc = TrainConfig {
        loss_mode: LossMode::Smoothed(cfg.epsilon),
        ..trainer.clone()
    };
    let (model, _) = train(corpus, &tc, None)?;
    let probs = predict_proba(&model, corpus)?;
    let p_obs: Vec<f64> = probs
        .iter()
        .zip(corpus.examples())
        .map(|(p, e)| p[usize::from(e.label)])
        .collect();
    let scores: Vec<f64> = p_obs.iter().map(|p| 1.0 - p).collect();
    let flags: Vec<bool> = p_obs.iter().map(|&p| p < cfg.tau).collect();
    Ok(verdicts_from("ls", corpus.ids(), &scores, &flags))
}

/// Trains with the corrected loss and flags examples whose corrected argmax
/// (ties toward class 0) disagrees with the observed label. Score is the
/// largest corrected probability among the other classes.
pub fn ntm_detect(corpus: &Corpus, tm: &TransitionMatrix, trainer: &TrainConfig) -> Result<Vec<NoiseVerdict>> {
    let tc = TrainConfig {
        loss_mode: LossMode::NtmCorrected(tm.clone()),
        ..trainer.clone()
    };
    let (model, _) = train(corpus, &tc, None)?;
    let adjusted = adjust_probabilities(&predict_proba(&model, corpus)?, tm.t_inv())?;
    let mut scores = Vec::with_capacity(corpus.len());
    let mut flags = Vec::with_capacity(corpus.len());
    for (q, ex) in adjusted.iter().zip(corpus.examples()) {
        let y = usize::from(ex.label);
        flags.push(argmax(q) != y);
        scores.push(
            q.iter()
                .enumerate()
                .filter(|&(j, _)| j != y)
                .map(|(_, &v)| v)
                .fold(0.0, f64::max),
        );
    }
    Ok(verdicts_from("ntm", corpus.ids(), &scores, &flags))
}
