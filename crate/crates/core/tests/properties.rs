use std::collections::BTreeSet;

use noisekit::config::PipelineConfig;
use noisekit::correction::{adjust_probabilities, estimate_transition, ls_detect, smooth_labels, SmoothingConfig, TransitionMatrix};
use noisekit::datamodel::{corpus_stats, load_corpus, save_corpus, Corpus, Example, NoiseKind, Source, Split};
use noisekit::gmm::{fit, Covariances, CovarianceType, GmmConfig};
use noisekit::intersect::{intersect_flags, mcc_matrix, upset_table, VerdictSet};
use noisekit::lossfilters::{co_teaching_detailed, discard_count, forget_rate, small_loss_trick, CtConfig, StConfig};
use noisekit::metrics::{mcc, roc_auc};
use noisekit::{rng, Error};
use noisekit::synth::{generate_tallied, SynthSpec};
use noisekit::threshold::{dip_threshold, flag, KdeConfig, ThresholdMode};
use noisekit::trainer::{train, TrainConfig};
use noisekit::verdict::{read_verdicts, write_verdicts, NoiseVerdict};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;

fn source() -> impl Strategy<Value = Source> {
    prop_oneof![Just(Source::Wiki), Just(Source::Viki), Just(Source::Synthetic)]
}

fn example(dim: usize) -> impl Strategy<Value = Example> {
    (
        prop::collection::vec(-1e6..1e6f64, dim),
        0u8..=1,
        source(),
        prop::option::of("[a-z ]{0,20}"),
        prop::option::of(prop_oneof![Just(NoiseKind::Clean), Just(NoiseKind::LabelFlip)]),
    )
        .prop_map(|(features, label, source, text, noise)| Example {
            text,
            true_noise: noise,
            ..Example::new("", features, source.implied_label().unwrap_or(label), source)
        })
}

fn corpus(max_n: usize) -> impl Strategy<Value = Corpus> {
    (1usize..5).prop_flat_map(move |dim| {
        prop::collection::vec(example(dim), 1..max_n).prop_map(move |mut exs| {
            for (i, e) in exs.iter_mut().enumerate() {
                e.id = format!("e{i}");
            }
            Corpus::new(exs, dim, Split::Train).unwrap()
        })
    })
}

/// Two Gaussian blobs with labels from the blob, a few flipped.
fn blobs(n: usize, seed: u64) -> Corpus {
    let mut r = rng::from_seed(seed);
    let exs = (0..n)
        .map(|i| {
            let c = u8::from(i % 2 == 1);
            let x = (0..2)
                .map(|a| if a == 0 { 2.0 * f64::from(c) } else { 0.0 } + r.sample::<f64, _>(StandardNormal))
                .collect();
            let label = if r.random::<f64>() < 0.1 { 1 - c } else { c };
            Example::new(format!("b{i}"), x, label, Source::Synthetic)
        })
        .collect();
    Corpus::new(exs, 2, Split::Train).unwrap()
}

fn flag_sets() -> impl Strategy<Value = (usize, Vec<Vec<bool>>)> {
    (5usize..60, 1usize..5).prop_flat_map(|(n, m)| (Just(n), prop::collection::vec(prop::collection::vec(any::<bool>(), n), m)))
}

fn to_sets(flags: &[Vec<bool>]) -> Vec<VerdictSet> {
    flags
        .iter()
        .enumerate()
        .map(|(k, f)| {
            let ids = f.iter().enumerate().filter(|(_, &x)| x).map(|(i, _)| format!("x{i:03}"));
            VerdictSet::new(format!("m{k}"), ids, f.len()).unwrap()
        })
        .collect()
}

fn cases(n: u32) -> ProptestConfig {
    ProptestConfig {
        cases: n,
        failure_persistence: None,
        ..ProptestConfig::default()
    }
}

proptest! {
    #![proptest_config(cases(64))]

    #[test]
    fn corpus_round_trips(c in corpus(30)) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        save_corpus(&c, &p).unwrap();
        let back = load_corpus(&p, None).unwrap();
        prop_assert_eq!(back.examples(), c.examples());
        prop_assert_eq!(back.dim(), c.dim());
    }

    #[test]
    fn corpus_stats_ignore_order(c in corpus(30), seed in any::<u64>()) {
        let mut exs = c.examples().to_vec();
        exs.shuffle(&mut rng::from_seed(seed));
        let shuffled = Corpus::new(exs, c.dim(), Split::Train).unwrap();
        prop_assert_eq!(corpus_stats(&shuffled), corpus_stats(&c));
    }

    #[test]
    fn verdicts_round_trip(scores in prop::collection::vec((-1e3..1e3f64, any::<bool>()), 0..40)) {
        let v: Vec<NoiseVerdict> = scores
            .iter()
            .enumerate()
            .map(|(i, &(score, flag))| NoiseVerdict { id: format!("v{i}"), method: "gmm".into(), score, flag })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.tsv");
        write_verdicts(&v, &p).unwrap();
        prop_assert_eq!(read_verdicts(&p).unwrap(), v);
    }

    #[test]
    fn smoothed_targets_are_distributions(eps in 0.0..=0.2f64, k in 2usize..6, label in 0u8..2) {
        let t = smooth_labels(label, eps, k);
        prop_assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let (lo, hi) = (eps / k as f64, 1.0 - eps + eps / k as f64);
        for v in t {
            prop_assert!(v >= lo - 1e-15 && v <= hi + 1e-15);
        }
    }

    #[test]
    fn identity_adjustment_is_identity(ps in prop::collection::vec(0.0..=1.0f64, 1..50)) {
        let rows: Vec<Vec<f64>> = ps.iter().map(|&p| vec![p, 1.0 - p]).collect();
        let adj = adjust_probabilities(&rows, TransitionMatrix::identity(2).t_inv()).unwrap();
        for (a, b) in rows.iter().zip(&adj) {
            // The clamp floor moves exact zeros by 1e-12 at most.
            prop_assert!((a[0] - b[0]).abs() <= 1e-12 && (a[1] - b[1]).abs() <= 1e-12);
        }
    }

    #[test]
    fn estimated_transition_is_row_stochastic(mut labels in prop::collection::vec(0u8..2, 2..80), seed in any::<u64>()) {
        // Both observed classes present.
        labels[0] = 0;
        labels[1] = 1;
        let exs: Vec<Example> = labels.iter().enumerate().map(|(i, &y)| Example::new(format!("t{i}"), vec![0.0], y, Source::Synthetic)).collect();
        let c = Corpus::new(exs, 1, Split::Train).unwrap();
        let mut r = rng::from_seed(seed);
        let flags: Vec<bool> = (0..c.len()).map(|_| r.random()).collect();
        match estimate_transition(&c, &flags) {
            Ok(tm) => {
                for row in tm.t() {
                    prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                    prop_assert!(row.iter().all(|&v| v > 0.0 && v < 1.0));
                }
            }
            Err(Error::Singular) => {
                // Only when both smoothed rows coincide: a[0]/(a[0]+a[1]) == b[0]/(b[0]+b[1]).
                let mut n = [[1u64; 2]; 2];
                for (&y, &f) in labels.iter().zip(&flags) {
                    let y = usize::from(y);
                    n[if f { 1 - y } else { y }][y] += 1;
                }
                prop_assert_eq!(n[0][0] * n[1][1], n[0][1] * n[1][0]);
            }
            Err(e) => prop_assert!(false, "unexpected error {}", e),
        }
    }

    #[test]
    fn forget_rate_is_linear(r_min in 0.0..0.4f64, span in 0.0..0.5f64, epochs in 1usize..40) {
        let cfg = CtConfig { r_min, r_max: r_min + span, epochs, ..CtConfig::default() };
        let rates: Vec<f64> = (0..=epochs).map(|t| forget_rate(t, &cfg).unwrap()).collect();
        let step = rates[1] - rates[0];
        for w in rates.windows(2) {
            prop_assert!((w[1] - w[0] - step).abs() <= 1e-12);
        }
    }

    #[test]
    fn discard_count_is_floor(r in 0.0..1.0f64, len in 1usize..300) {
        let d = discard_count(r, len);
        prop_assert!(d <= len);
        prop_assert!(d as f64 <= r * len as f64 + 1e-6);
        prop_assert!((d + 1) as f64 > r * len as f64);
    }

    #[test]
    fn roc_auc_ignores_monotone_maps(raw in prop::collection::vec((-5.0..5.0f64, 0u8..2), 2..120), a in 0.1..10.0f64, b in -3.0..3.0f64) {
        prop_assume!(raw.iter().any(|x| x.1 == 0) && raw.iter().any(|x| x.1 == 1));
        let (s, y): (Vec<f64>, Vec<u8>) = raw.into_iter().unzip();
        let base = roc_auc(&s, &y).unwrap();
        let mapped: Vec<f64> = s.iter().map(|v| (a * v + b).tanh() + v.powi(3)).collect();
        prop_assert!((roc_auc(&mapped, &y).unwrap() - base).abs() <= 1e-12);
        let distinct: BTreeSet<u64> = s.iter().map(|v| v.to_bits()).collect();
        if distinct.len() == s.len() {
            let neg: Vec<f64> = s.iter().map(|v| -v).collect();
            prop_assert!((roc_auc(&neg, &y).unwrap() + base - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn mcc_symmetric_and_complement_invariant(pairs in prop::collection::vec((any::<bool>(), any::<bool>()), 1..100)) {
        let (a, b): (Vec<bool>, Vec<bool>) = pairs.into_iter().unzip();
        let ab = mcc(&a, &b);
        prop_assert_eq!(ab, mcc(&b, &a));
        let na: Vec<bool> = a.iter().map(|x| !x).collect();
        let nb: Vec<bool> = b.iter().map(|x| !x).collect();
        let c = mcc(&na, &nb);
        prop_assert_eq!(c.degenerate, ab.degenerate);
        prop_assert!((c.value - ab.value).abs() <= 1e-12);
    }

    #[test]
    fn upset_partitions_the_union((n, flags) in flag_sets()) {
        let sets = to_sets(&flags);
        let rows = upset_table(&sets).unwrap();
        let union: BTreeSet<&String> = sets.iter().flat_map(|s| &s.flagged).collect();
        prop_assert_eq!(rows.iter().map(|r| r.count).sum::<usize>(), union.len());
        for r in &rows {
            prop_assert!((r.fraction - r.count as f64 / n as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn intersection_order_invariant_and_idempotent((_n, flags) in flag_sets(), seed in any::<u64>()) {
        let sets = to_sets(&flags);
        let names: Vec<String> = sets.iter().map(|s| s.method.clone()).collect();
        let mut refs: Vec<&str> = names.iter().map(String::as_str).collect();
        let base = intersect_flags(&sets, &refs).unwrap();
        refs.shuffle(&mut rng::from_seed(seed));
        prop_assert_eq!(&intersect_flags(&sets, &refs).unwrap(), &base);
        let mut doubled = refs.clone();
        doubled.extend(refs.iter().copied());
        prop_assert_eq!(&intersect_flags(&sets, &doubled).unwrap(), &base);
    }

    #[test]
    fn mcc_matrix_symmetric_unit_diagonal((_n, flags) in flag_sets()) {
        let sets = to_sets(&flags);
        let m = mcc_matrix(&sets).unwrap();
        for i in 0..sets.len() {
            let nonconstant = !sets[i].flagged.is_empty() && sets[i].flagged.len() < sets[i].universe;
            if nonconstant {
                prop_assert_eq!(m[i][i].value, 1.0);
            }
            for j in 0..sets.len() {
                prop_assert_eq!(m[i][j].value, m[j][i].value);
            }
        }
    }

    #[test]
    fn flags_are_strictly_above(scores in prop::collection::vec(-1.0..1.0f64, 0..50), t in -1.0..1.0f64) {
        for (s, f) in scores.iter().zip(flag(&scores, t)) {
            prop_assert_eq!(f, *s > t);
        }
    }
}

proptest! {
    #![proptest_config(cases(16))]

    #[test]
    fn threshold_moves_with_affine_rescaling(seed in any::<u64>(), a in 0.2..5.0f64, b in -10.0..10.0f64) {
        let mut r = rng::from_seed(seed);
        let s: Vec<f64> = (0..400)
            .map(|i| if i % 4 == 0 { 0.8 } else { 0.2 } + 0.05 * r.sample::<f64, _>(StandardNormal))
            .collect();
        let (t, mode) = dip_threshold(&s, &KdeConfig::default()).unwrap();
        let scaled: Vec<f64> = s.iter().map(|v| a * v + b).collect();
        let (ts, mode_s) = dip_threshold(&scaled, &KdeConfig::default()).unwrap();
        prop_assert_eq!(mode, mode_s);
        prop_assert!((ts - (a * t + b)).abs() <= 1e-9 * (1.0 + ts.abs()), "{} vs {}", ts, a * t + b);
        prop_assert_eq!(flag(&s, t), flag(&scaled, ts));
        prop_assert_eq!(mode, ThresholdMode::Dip);
    }

    #[test]
    fn responsibilities_sum_to_one(seed in any::<u64>(), k in 1usize..4) {
        let c = blobs(120, seed);
        let rows = c.feature_rows();
        let m = fit(&rows, &GmmConfig { n_components: k, n_init: 1, seed, ..GmmConfig::default() }).unwrap();
        for r in m.responsibilities(&rows).unwrap() {
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
        for w in m.log_likelihood.windows(2) {
            prop_assert!(w[1] >= w[0] - 1e-8);
        }
    }

    #[test]
    fn tied_components_are_bit_identical(seed in any::<u64>()) {
        let rows = blobs(150, seed).feature_rows();
        let cfg = GmmConfig { n_components: 3, covariance_type: CovarianceType::Tied, n_init: 1, seed, ..GmmConfig::default() };
        let m = fit(&rows, &cfg).unwrap();
        let Covariances::Tied(_) = &m.covariances else { panic!("expected tied covariances") };
        let first = m.covariances.matrix(0, 2);
        for k in 1..3 {
            prop_assert_eq!(m.covariances.matrix(k, 2), first.clone());
        }
    }

    #[test]
    fn full_fit_on_isotropic_data_is_near_diagonal(seed in any::<u64>()) {
        let mut r = rng::from_seed(seed);
        let rows: Vec<Vec<f64>> = (0..4000).map(|_| (0..3).map(|_| r.sample::<f64, _>(StandardNormal)).collect()).collect();
        let m = fit(&rows, &GmmConfig { n_components: 1, n_init: 1, seed, ..GmmConfig::default() }).unwrap();
        let s = m.covariances.matrix(0, 3);
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    prop_assert!(s[(i, j)].abs() < 0.1 * s[(i, i)].min(s[(j, j)]));
                }
            }
        }
    }

    #[test]
    fn st_flag_count_bounded(seed in any::<u64>(), p in 0.5..0.95f64, epochs in 1usize..4) {
        let c = blobs(200, seed);
        let cfg = StConfig { retain_percentile: p, epochs, trainer: TrainConfig { seed, ..TrainConfig::default() } };
        let v = small_loss_trick(&c, &cfg).unwrap();
        let bound = ((1.0 - p) * c.len() as f64).ceil() as usize;
        prop_assert!(v.iter().filter(|x| x.flag).count() <= bound);
    }

    #[test]
    fn ct_discards_match_schedule(seed in any::<u64>(), r_max in 0.0..0.6f64, bs in 8usize..64) {
        let c = blobs(150, seed);
        let cfg = CtConfig { r_max, epochs: 4, trainer: TrainConfig { seed, batch_size: bs, ..TrainConfig::default() }, ..CtConfig::default() };
        let out = co_teaching_detailed(&c, &cfg).unwrap();
        for (t, batches) in out.batch_discards.iter().enumerate() {
            let r = forget_rate(t, &cfg).unwrap();
            for &(len, dropped) in batches {
                prop_assert_eq!(dropped, (r * len as f64 + 1e-9).floor() as usize);
            }
        }
        prop_assert_eq!(co_teaching_detailed(&c, &cfg).unwrap(), out);
    }

    #[test]
    fn ls_flags_grow_with_tau(seed in any::<u64>(), t1 in 0.0..1.0f64, t2 in 0.0..1.0f64) {
        let c = blobs(150, seed);
        let tc = TrainConfig { seed, ..TrainConfig::default() };
        let (lo, hi) = (t1.min(t2), t1.max(t2));
        let at = |tau| ls_detect(&c, &SmoothingConfig { tau, ..SmoothingConfig::default() }, &tc).unwrap();
        for (a, b) in at(lo).iter().zip(at(hi)) {
            prop_assert!(!a.flag || b.flag);
        }
    }

    #[test]
    fn full_batch_training_ignores_order(seed in any::<u64>()) {
        let c = blobs(60, seed);
        let tc = TrainConfig { seed, batch_size: 60, shuffle: false, epochs: 3, ..TrainConfig::default() };
        let mut perm: Vec<usize> = (0..c.len()).collect();
        perm.shuffle(&mut rng::from_seed(seed ^ 1));
        let permuted = Corpus::new(perm.iter().map(|&i| c.examples()[i].clone()).collect(), 2, Split::Train).unwrap();
        let (m1, t1) = train(&c, &tc, None).unwrap();
        let (m2, t2) = train(&permuted, &tc, None).unwrap();
        for (a, b) in m1.weights.iter().flatten().chain(&m1.bias).zip(m2.weights.iter().flatten().chain(&m2.bias)) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
        for (row1, row2) in t1.losses.iter().zip(&t2.losses) {
            for (j, &i) in perm.iter().enumerate() {
                prop_assert!((row2[j] - row1[i]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn synth_rates_and_means(seed in any::<u64>(), flip in 0.0..0.3f64, structural in 0.0..0.1f64) {
        let spec = SynthSpec { flip_rate: flip, structural_rate: structural, n_per_class: 2000, seed, ..SynthSpec::demo(seed) };
        let (c, tally) = generate_tallied(&spec).unwrap();
        let n = c.len() as f64;
        let tol = 3.0 / n.sqrt();
        prop_assert!((tally.label_flip as f64 / n - flip).abs() <= tol);
        prop_assert!((tally.structural as f64 / n - structural).abs() <= tol);
        for (class, mean) in [(0u8, &spec.class_mean_0), (1, &spec.class_mean_1)] {
            let clean: Vec<&Example> = c.examples().iter().filter(|e| e.true_noise == Some(NoiseKind::Clean) && e.label == class).collect();
            let m = clean.len() as f64;
            for a in 0..spec.dim {
                let avg = clean.iter().map(|e| e.features[a]).sum::<f64>() / m;
                prop_assert!((avg - mean[a]).abs() <= 4.0 * spec.class_spread / m.sqrt());
            }
        }
    }
}

#[test]
fn config_defaults_validate() {
    let mut c = PipelineConfig::default();
    c.seed = Some(1);
    c.validate().unwrap();
}
