//! Loss-based detectors: the small-loss trick and co-teaching.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::datamodel::Corpus;
use crate::trainer::{check_trainable, example_loss, per_example_loss, sgd_step, LinearModel, TrainConfig};
use crate::verdict::{verdicts_from, NoiseVerdict};
use crate::{rng, Error, Result};

/// Guards ceil/floor of products like `0.3 * 10` against representation error.
const COUNT_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct StConfig {
    pub retain_percentile: f64,
    pub epochs: usize,
    /// Supplies seed, batch size, learning rate and loss. Its `epochs` is unused.
    pub trainer: TrainConfig,
}

impl Default for StConfig {
    fn default() -> Self {
        StConfig {
            retain_percentile: 0.75,
            epochs: 5,
            trainer: TrainConfig::default(),
        }
    }
}

impl StConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.retain_percentile > 0.0 && self.retain_percentile < 1.0) {
            return Err(Error::invalid("retain_percentile must lie in (0, 1)"));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        self.trainer.validate()
    }

    /// Examples excluded per epoch: `ceil((1 - p) n)`.
    pub fn excluded_count(&self, n: usize) -> usize {
        (((1.0 - self.retain_percentile) * n as f64) - COUNT_SLACK).ceil().max(0.0) as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlagRule {
    BothLastEpoch,
    BothMajorityEpochs,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CtConfig {
    pub r_min: f64,
    pub r_max: f64,
    pub epochs: usize,
    pub flag_rule: FlagRule,
    /// Start both peers from the same initialization. Diagnostic only: the
    /// peers then stay identical and the run reduces to self-filtering.
    pub identical_peers: bool,
    /// Supplies seed, batch size, learning rate and loss. Its `epochs` is unused.
    pub trainer: TrainConfig,
}

impl Default for CtConfig {
    fn default() -> Self {
        CtConfig {
            r_min: 0.0,
            r_max: 0.3,
            epochs: 10,
            flag_rule: FlagRule::BothMajorityEpochs,
            identical_peers: false,
            trainer: TrainConfig::default(),
        }
    }
}

impl CtConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.r_min && self.r_min <= self.r_max && self.r_max < 1.0) {
            return Err(Error::invalid("forget rates need 0 <= r_min <= r_max < 1"));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        self.trainer.validate()
    }
}

/// `r_min + (r_max - r_min) * t / T` for `t` in `0..=T`.
pub fn forget_rate(t: usize, cfg: &CtConfig) -> Result<f64> {
    if t > cfg.epochs {
        return Err(Error::invalid(format!("epoch {t} is past the schedule end {}", cfg.epochs)));
    }
    Ok(cfg.r_min + (cfg.r_max - cfg.r_min) * t as f64 / cfg.epochs as f64)
}

/// Number of batch members dropped at forget rate `r`.
pub fn discard_count(r: f64, batch_len: usize) -> usize {
    ((r * batch_len as f64) + COUNT_SLACK).floor() as usize
}

/// Indices sorted by ascending loss, equal losses in index order.
fn rank_by_loss(indices: &[usize], losses: impl Fn(usize) -> f64) -> Vec<usize> {
    let mut keyed: Vec<(f64, usize)> = indices.iter().map(|&i| (losses(i), i)).collect();
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    keyed.into_iter().map(|(_, i)| i).collect()
}

fn train_epoch(model: &mut LinearModel, corpus: &Corpus, indices: &mut [usize], tc: &TrainConfig, order: &mut rng::Rng, epoch: usize) -> Result<()> {
    if tc.shuffle {
        indices.shuffle(order);
    }
    for (b, batch) in indices.chunks(tc.batch_size).enumerate() {
        sgd_step(model, corpus, batch, &tc.loss_mode, tc.learning_rate, epoch, b)?;
    }
    Ok(())
}

/// Each epoch scores the full corpus with the current model, excludes the
/// highest-loss `ceil((1-p) n)` examples and trains one epoch on the rest.
/// The first selection uses the freshly initialized model. Examples excluded
/// in every epoch are flagged; the score is the excluded fraction of epochs.
pub fn small_loss_trick(corpus: &Corpus, cfg: &StConfig) -> Result<Vec<NoiseVerdict>> {
    cfg.validate()?;
    let n = corpus.len();
    let excluded = cfg.excluded_count(n);
    if n - excluded.min(n) < 2 {
        return Err(Error::invalid(format!("retaining {} of {n} examples leaves fewer than two", n - excluded.min(n))));
    }
    let all: Vec<usize> = (0..n).collect();
    check_trainable(corpus, &all)?;
    let tc = &cfg.trainer;
    let mut model = LinearModel::init(2, corpus.dim(), tc.seed);
    let mut order = rng::stream(tc.seed, "batch-order");
    let mut times_excluded = vec![0usize; n];
    for epoch in 0..cfg.epochs {
        let losses = per_example_loss(&model, corpus, &tc.loss_mode)?;
        let ranked = rank_by_loss(&all, |i| losses[i]);
        let (kept, dropped) = ranked.split_at(n - excluded);
        for &i in dropped {
            times_excluded[i] += 1;
        }
        let mut kept = kept.to_vec();
        kept.sort_unstable();
        train_epoch(&mut model, corpus, &mut kept, tc, &mut order, epoch)?;
    }
    let e = cfg.epochs as f64;
    let scores: Vec<f64> = times_excluded.iter().map(|&c| c as f64 / e).collect();
    let flags: Vec<bool> = times_excluded.iter().map(|&c| c == cfg.epochs).collect();
    Ok(verdicts_from("st", corpus.ids(), &scores, &flags))
}

/// Co-teaching output with per-batch bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct CtOutcome {
    pub verdicts: Vec<NoiseVerdict>,
    /// `(batch_len, discarded)` per batch for each epoch, counted on peer A.
    pub batch_discards: Vec<Vec<(usize, usize)>>,
    /// Forget rate used in each epoch.
    pub rates: Vec<f64>,
}

pub fn co_teaching(corpus: &Corpus, cfg: &CtConfig) -> Result<Vec<NoiseVerdict>> {
    Ok(co_teaching_detailed(corpus, cfg)?.verdicts)
}

/// Two peers trained on the same batch stream. In every batch each peer keeps
/// its own lowest-loss `1 - r_t` share and the other peer updates on it.
pub fn co_teaching_detailed(corpus: &Corpus, cfg: &CtConfig) -> Result<CtOutcome> {
    run_filtering(corpus, cfg, false, "ct")
}

/// One model that keeps its own lowest-loss share of each batch and trains on it.
pub fn self_filtering(corpus: &Corpus, cfg: &CtConfig) -> Result<Vec<NoiseVerdict>> {
    Ok(run_filtering(corpus, cfg, true, "self")?.verdicts)
}

fn run_filtering(corpus: &Corpus, cfg: &CtConfig, single: bool, method: &str) -> Result<CtOutcome> {
    cfg.validate()?;
    let n = corpus.len();
    let mut indices: Vec<usize> = (0..n).collect();
    check_trainable(corpus, &indices)?;
    let tc = &cfg.trainer;
    let seed_a = rng::derive_seed(tc.seed, "ct-peer-a");
    let seed_b = if cfg.identical_peers { seed_a } else { rng::derive_seed(tc.seed, "ct-peer-b") };
    let mut a = LinearModel::init(2, corpus.dim(), seed_a);
    let mut b = LinearModel::init(2, corpus.dim(), seed_b);
    let mut order = rng::stream(tc.seed, "batch-order");
    let mode = &tc.loss_mode;
    let loss = |m: &LinearModel, i: usize| {
        let e = &corpus.examples()[i];
        example_loss(m, &e.features, e.label, mode)
    };

    let mut both_discarded = vec![vec![false; n]; cfg.epochs];
    let mut batch_discards = Vec::with_capacity(cfg.epochs);
    let mut rates = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let r = forget_rate(epoch, cfg)?;
        rates.push(r);
        if tc.shuffle {
            indices.shuffle(&mut order);
        }
        let mut counts = Vec::new();
        for (bn, batch) in indices.chunks(tc.batch_size).enumerate() {
            let keep = batch.len() - discard_count(r, batch.len());
            if keep < 1 {
                return Err(Error::invalid(format!("batch of {} retains no examples", batch.len())));
            }
            let kept_a = rank_by_loss(batch, |i| loss(&a, i))[..keep].to_vec();
            let kept_b = if single {
                kept_a.clone()
            } else {
                rank_by_loss(batch, |i| loss(&b, i))[..keep].to_vec()
            };
            for &i in batch {
                if !kept_a.contains(&i) && !kept_b.contains(&i) {
                    both_discarded[epoch][i] = true;
                }
            }
            counts.push((batch.len(), batch.len() - keep));
            if single {
                sgd_step(&mut a, corpus, &kept_a, mode, tc.learning_rate, epoch, bn)?;
            } else {
                sgd_step(&mut a, corpus, &kept_b, mode, tc.learning_rate, epoch, bn)?;
                sgd_step(&mut b, corpus, &kept_a, mode, tc.learning_rate, epoch, bn)?;
            }
        }
        batch_discards.push(counts);
    }

    let active: Vec<usize> = (0..cfg.epochs).filter(|&t| rates[t] > 0.0).collect();
    let mut scores = Vec::with_capacity(n);
    let mut flags = Vec::with_capacity(n);
    for i in 0..n {
        let hits = both_discarded.iter().filter(|e| e[i]).count();
        scores.push(hits as f64 / cfg.epochs as f64);
        flags.push(match cfg.flag_rule {
            FlagRule::BothLastEpoch => both_discarded[cfg.epochs - 1][i],
            FlagRule::BothMajorityEpochs => {
                let active_hits = active.iter().filter(|&&t| both_discarded[t][i]).count();
                2 * active_hits > active.len()
            }
        });
    }
    Ok(CtOutcome {
        verdicts: verdicts_from(method, corpus.ids(), &scores, &flags),
        batch_discards,
        rates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{Example, Source, Split};
    use crate::verdict::flags_of;

    fn small_corpus(n: usize) -> Corpus {
        let exs = (0..n)
            .map(|i| {
                let y = (i % 2) as u8;
                let x = if y == 1 { 1.0 } else { -1.0 } + (i as f64 * 0.37).sin();
                Example::new(format!("e{i}"), vec![x, (i as f64 * 0.11).cos()], y, Source::Synthetic)
            })
            .collect();
        Corpus::new(exs, 2, Split::Train).unwrap()
    }

    #[test]
    fn schedule_endpoints() {
        let cfg = CtConfig::default();
        assert_eq!(forget_rate(0, &cfg).unwrap(), 0.0);
        assert_eq!(forget_rate(cfg.epochs, &cfg).unwrap(), 0.3);
        let even = CtConfig { epochs: 4, ..CtConfig::default() };
        assert_eq!(forget_rate(2, &even).unwrap(), 0.15);
        assert!(forget_rate(cfg.epochs + 1, &cfg).is_err());
    }

    #[test]
    fn excluded_count_uses_ceiling() {
        let cfg = StConfig::default();
        assert_eq!(cfg.excluded_count(100), 25);
        assert_eq!(cfg.excluded_count(101), 26);
        let p7 = StConfig { retain_percentile: 0.7, ..StConfig::default() };
        assert_eq!(p7.excluded_count(10), 3);
        assert_eq!(discard_count(0.3, 10), 3);
        assert_eq!(discard_count(0.15, 64), 9);
    }

    #[test]
    fn st_single_epoch_flags_top_losses() {
        let c = small_corpus(40);
        let cfg = StConfig { epochs: 1, ..StConfig::default() };
        let v = small_loss_trick(&c, &cfg).unwrap();
        let fresh = LinearModel::init(2, 2, cfg.trainer.seed);
        let losses = per_example_loss(&fresh, &c, &cfg.trainer.loss_mode).unwrap();
        let mut order: Vec<usize> = (0..40).collect();
        order.sort_by(|&x, &y| losses[y].total_cmp(&losses[x]).then(y.cmp(&x)));
        let mut expected = vec![false; 40];
        for &i in &order[..10] {
            expected[i] = true;
        }
        assert_eq!(flags_of(&v), expected);
    }

    #[test]
    fn st_flag_count_bounded() {
        let c = small_corpus(60);
        let cfg = StConfig::default();
        let v = small_loss_trick(&c, &cfg).unwrap();
        assert!(flags_of(&v).iter().filter(|&&f| f).count() <= cfg.excluded_count(60));
        assert!(v.iter().all(|x| (0.0..=1.0).contains(&x.score)));
    }

    #[test]
    fn st_too_small() {
        let c = small_corpus(2);
        assert!(small_loss_trick(&c, &StConfig::default()).is_err());
    }

    #[test]
    fn ct_null_schedule_flags_nothing() {
        let c = small_corpus(50);
        let cfg = CtConfig { r_max: 0.0, epochs: 4, ..CtConfig::default() };
        let v = co_teaching(&c, &cfg).unwrap();
        assert!(v.iter().all(|x| !x.flag && x.score == 0.0));
    }

    #[test]
    fn ct_identical_peers_match_self_filtering() {
        let c = small_corpus(80);
        let cfg = CtConfig {
            epochs: 6,
            identical_peers: true,
            trainer: TrainConfig { batch_size: 16, ..TrainConfig::default() },
            ..CtConfig::default()
        };
        assert_eq!(flags_of(&co_teaching(&c, &cfg).unwrap()), flags_of(&self_filtering(&c, &cfg).unwrap()));
    }

    #[test]
    fn ct_discards_follow_schedule() {
        let c = small_corpus(70);
        let cfg = CtConfig {
            epochs: 5,
            trainer: TrainConfig { batch_size: 16, ..TrainConfig::default() },
            ..CtConfig::default()
        };
        let out = co_teaching_detailed(&c, &cfg).unwrap();
        for (r, batches) in out.rates.iter().zip(&out.batch_discards) {
            for &(len, dropped) in batches {
                assert_eq!(dropped, (r * len as f64 + 1e-9).floor() as usize);
            }
        }
    }

    #[test]
    fn detectors_are_deterministic() {
        let c = small_corpus(50);
        assert_eq!(
            small_loss_trick(&c, &StConfig::default()).unwrap(),
            small_loss_trick(&c, &StConfig::default()).unwrap()
        );
        assert_eq!(co_teaching(&c, &CtConfig::default()).unwrap(), co_teaching(&c, &CtConfig::default()).unwrap());
    }
}
