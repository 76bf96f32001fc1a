//! Evaluation metrics: rank-based ROC-AUC, F1/precision/recall, MCC, and the
//! provenance composition of flagged sets.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::datamodel::{Corpus, Source};
use crate::{Error, Result};

/// Mann–Whitney AUC with average ranks for tied scores.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: labels.len(),
            got: scores.len(),
        });
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::invalid("scores must be finite"));
    }
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::invalid("roc_auc needs both classes"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j share their average.
        let avg = (i + 1 + j) as f64 / 2.0;
        let pos_in_block = order[i..j].iter().filter(|&&k| labels[k] == 1).count();
        rank_sum_pos += avg * pos_in_block as f64;
        i = j;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrecisionRecall {
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    /// Set when a zero denominator forced one of the values to 0.
    pub degenerate: bool,
}

/// Positive class is 1.
pub fn f1_prec_rec(pred: &[bool], labels: &[u8]) -> PrecisionRecall {
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&p, &y) in pred.iter().zip(labels) {
        match (p, y == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let mut degenerate = false;
    let mut ratio = |num: usize, den: usize| {
        if den == 0 {
            degenerate = true;
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = ratio(2 * tp, 2 * tp + fp + fn_);
    PrecisionRecall {
        f1,
        precision,
        recall,
        degenerate,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mcc {
    pub value: f64,
    /// Set when a margin of the contingency table is empty; `value` is then 0.
    pub degenerate: bool,
}

/// 2×2 contingency of two binary vectors: `[[n11, n10], [n01, n00]]`.
pub fn contingency(a: &[bool], b: &[bool]) -> [[usize; 2]; 2] {
    let mut t = [[0usize; 2]; 2];
    for (&x, &y) in a.iter().zip(b) {
        t[usize::from(!x)][usize::from(!y)] += 1;
    }
    t
}

pub fn mcc_from_counts(n11: usize, n10: usize, n01: usize, n00: usize) -> Mcc {
    let [a, b, c, d] = [n11, n10, n01, n00].map(|v| v as f64);
    let den = (a + b) * (a + c) * (d + b) * (d + c);
    if den == 0.0 {
        return Mcc {
            value: 0.0,
            degenerate: true,
        };
    }
    Mcc {
        value: (a * d - b * c) / den.sqrt(),
        degenerate: false,
    }
}

pub fn mcc(a: &[bool], b: &[bool]) -> Mcc {
    let [[n11, n10], [n01, n00]] = contingency(a, b);
    mcc_from_counts(n11, n10, n01, n00)
}

/// Share of each provenance among flagged examples. Empty when nothing is flagged.
pub fn composition(flags: &[bool], corpus: &Corpus) -> Result<BTreeMap<Source, f64>> {
    if flags.len() != corpus.len() {
        return Err(Error::DimensionMismatch {
            expected: corpus.len(),
            got: flags.len(),
        });
    }
    let mut counts: BTreeMap<Source, usize> = BTreeMap::new();
    for (e, _) in corpus.examples().iter().zip(flags).filter(|(_, &f)| f) {
        *counts.entry(e.source).or_default() += 1;
    }
    let total: usize = counts.values().sum();
    Ok(counts
        .into_iter()
        .map(|(s, c)| (s, c as f64 / total as f64))
        .collect())
}

/// Held-out evaluation of one trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub auc: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub mcc: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    /// Provenance shares of the flagged training examples behind this model.
    pub composition: BTreeMap<Source, f64>,
}

/// Scores are P(class 1); hard predictions take the argmax with ties to class 0.
pub fn evaluate(prob_pos: &[f64], labels: &[u8], composition: BTreeMap<Source, f64>) -> Result<EvalReport> {
    let auc = roc_auc(prob_pos, labels)?;
    let pred: Vec<bool> = prob_pos.iter().map(|&p| p > 0.5).collect();
    let truth: Vec<bool> = labels.iter().map(|&y| y == 1).collect();
    let pr = f1_prec_rec(&pred, labels);
    let n_pos = truth.iter().filter(|&&t| t).count();
    Ok(EvalReport {
        auc,
        f1: pr.f1,
        precision: pr.precision,
        recall: pr.recall,
        mcc: mcc(&pred, &truth).value,
        n_pos,
        n_neg: labels.len() - n_pos,
        composition,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{Example, Split};

    /// Fraction of (pos, neg) pairs ranked correctly, ties counting one half.
    fn brute_auc(scores: &[f64], labels: &[u8]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (i, &si) in scores.iter().enumerate() {
            for (j, &sj) in scores.iter().enumerate() {
                if labels[i] == 1 && labels[j] == 0 {
                    den += 1.0;
                    num += if si > sj { 1.0 } else if si == sj { 0.5 } else { 0.0 };
                }
            }
        }
        num / den
    }

    #[test]
    fn auc_examples() {
        assert_eq!(roc_auc(&[0.3; 6], &[0, 1, 1, 0, 1, 1]).unwrap(), 0.5);
        assert_eq!(roc_auc(&[0.0, 1.0, 1.0, 0.0], &[0, 1, 1, 0]).unwrap(), 1.0);
        let s = [0.1, 0.4, 0.35, 0.8];
        let y = [0, 0, 1, 1];
        assert_eq!(brute_auc(&s, &y), 0.75);
        assert!((roc_auc(&s, &y).unwrap() - 0.75).abs() < 1e-15);
        assert!(roc_auc(&[0.1, 0.2], &[1, 1]).is_err());
    }

    #[test]
    fn auc_with_ties_matches_brute_force() {
        let s = [0.1, 0.1, 0.5, 0.5, 0.5, 0.9, 0.2];
        let y = [0, 1, 0, 1, 1, 0, 1];
        assert!((roc_auc(&s, &y).unwrap() - brute_auc(&s, &y)).abs() < 1e-15);
    }

    #[test]
    fn f1_examples() {
        let y = [1, 0, 1, 1, 0];
        let truth: Vec<bool> = y.iter().map(|&v| v == 1).collect();
        let pr = f1_prec_rec(&truth, &y);
        assert_eq!((pr.f1, pr.precision, pr.recall, pr.degenerate), (1.0, 1.0, 1.0, false));
        let none = f1_prec_rec(&[false; 5], &y);
        assert_eq!((none.f1, none.precision, none.recall), (0.0, 0.0, 0.0));
        assert!(none.degenerate);
    }

    #[test]
    fn majority_class_f1() {
        // r positives per negative: precision r/(r+1), recall 1.
        for (n_pos, n_neg) in [(607, 100), (15, 1), (3, 1)] {
            let labels: Vec<u8> = (0..n_pos + n_neg).map(|i| u8::from(i < n_pos)).collect();
            let pr = f1_prec_rec(&vec![true; labels.len()], &labels);
            let r = n_pos as f64 / n_neg as f64;
            assert!((pr.f1 - 2.0 * r / (2.0 * r + 1.0)).abs() < 1e-15);
        }
    }

    #[test]
    fn mcc_examples() {
        let a = [true, false, true, false];
        assert_eq!(mcc(&a, &a).value, 1.0);
        let b: Vec<bool> = a.iter().map(|v| !v).collect();
        assert_eq!(mcc(&a, &b).value, -1.0);
        let constant = mcc(&[true; 4], &a);
        assert!(constant.degenerate && constant.value == 0.0);
    }

    #[test]
    fn mcc_hand_table_matches_pearson() {
        // TP=4, FP=1, FN=2, TN=3 laid out as vectors (a = prediction, b = truth).
        let mut a = Vec::new();
        let mut b = Vec::new();
        for (x, y, n) in [(true, true, 4), (true, false, 1), (false, true, 2), (false, false, 3)] {
            for _ in 0..n {
                a.push(x);
                b.push(y);
            }
        }
        // Pearson correlation of the 0/1 indicators, computed directly.
        let xa: Vec<f64> = a.iter().map(|&v| f64::from(u8::from(v))).collect();
        let xb: Vec<f64> = b.iter().map(|&v| f64::from(u8::from(v))).collect();
        let n = xa.len() as f64;
        let (ma, mb) = (xa.iter().sum::<f64>() / n, xb.iter().sum::<f64>() / n);
        let cov: f64 = xa.iter().zip(&xb).map(|(p, q)| (p - ma) * (q - mb)).sum();
        let va: f64 = xa.iter().map(|p| (p - ma).powi(2)).sum();
        let vb: f64 = xb.iter().map(|q| (q - mb).powi(2)).sum();
        let pearson = cov / (va * vb).sqrt();
        let m = mcc(&a, &b);
        assert!((m.value - pearson).abs() < 1e-12);
        // (4·3 − 1·2) / √(5·6·4·5)
        assert!((m.value - 10.0 / 600f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn composition_examples() {
        let exs = (0..5)
            .map(|i| {
                let src = if i < 3 { Source::Wiki } else { Source::Viki };
                Example::new(format!("e{i}"), vec![0.0], src.implied_label().unwrap(), src)
            })
            .collect();
        let c = Corpus::new(exs, 1, Split::Train).unwrap();
        let all_wiki = composition(&[true, true, false, false, false], &c).unwrap();
        assert_eq!(all_wiki, BTreeMap::from([(Source::Wiki, 1.0)]));
        let mixed = composition(&[true, true, true, true, false], &c).unwrap();
        assert_eq!(mixed, BTreeMap::from([(Source::Wiki, 0.75), (Source::Viki, 0.25)]));
        assert!(composition(&[false; 5], &c).unwrap().is_empty());
    }

    #[test]
    fn eval_report_field_names() {
        let r = evaluate(&[0.2, 0.9, 0.6, 0.4], &[0, 1, 1, 0], BTreeMap::new()).unwrap();
        assert_eq!(r.auc, 1.0);
        let v: serde_json::Value = serde_json::to_value(&r).unwrap();
        let keys: Vec<&String> = v.as_object().unwrap().keys().collect();
        assert_eq!(
            keys,
            ["auc", "composition", "f1", "mcc", "n_neg", "n_pos", "precision", "recall"]
        );
    }
}
