//! Synthetic noisy corpora with ground-truth noise annotations.
//!
//! Each class is an isotropic Gaussian cluster. Class 0 is subsampled by the
//! imbalance ratio, then every example independently receives one noise
//! category:
//!
//! - label flip: features from the true class, observed label inverted;
//! - structural: features uniform in the shell of radius 6–10 spreads around
//!   the midpoint of the class means, label kept;
//! - content: features from the opposite class with 1.5× the spread, label kept.
//!
//! Provenance follows the observed label (1 → wiki, 0 → viki), the same way
//! provenance fixes labels in real corpora.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::datamodel::{Corpus, Example, NoiseKind, Source, Split};
use crate::verdict::NoiseVerdict;
use crate::{rng, Error, Result};

const SHELL_INNER: f64 = 6.0;
const SHELL_OUTER: f64 = 10.0;
const CONTENT_SPREAD_SCALE: f64 = 1.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    /// Size of class 1 (the majority class) before noise injection.
    pub n_per_class: usize,
    pub dim: usize,
    pub class_mean_0: Vec<f64>,
    pub class_mean_1: Vec<f64>,
    /// Isotropic standard deviation of both clusters.
    pub class_spread: f64,
    pub flip_rate: f64,
    pub structural_rate: f64,
    pub content_rate: f64,
    /// Class 0 keeps `n_per_class / imbalance_ratio` examples.
    pub imbalance_ratio: f64,
    pub seed: u64,
}

impl SynthSpec {
    /// Defaults used by the demo configuration: 5000 examples in eight
    /// dimensions (3500 class 1, 1500 class 0), means 2.5 spreads apart along
    /// one axis, 10% flips and 5% structural noise.
    pub fn demo(seed: u64) -> Self {
        let dim = 8;
        let mut m1 = vec![0.0; dim];
        m1[0] = 2.5;
        SynthSpec {
            n_per_class: 3500,
            dim,
            class_mean_0: vec![0.0; dim],
            class_mean_1: m1,
            class_spread: 1.0,
            flip_rate: 0.10,
            structural_rate: 0.05,
            content_rate: 0.0,
            imbalance_ratio: 7.0 / 3.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(format!("synth spec: {m}")));
        if self.n_per_class == 0 || self.dim == 0 {
            return bad("n_per_class and dim must be positive");
        }
        if self.class_mean_0.len() != self.dim || self.class_mean_1.len() != self.dim {
            return bad("class means must have length dim");
        }
        if self.class_mean_0 == self.class_mean_1 {
            return bad("class means must be distinct");
        }
        if self.class_mean_0.iter().chain(&self.class_mean_1).any(|v| !v.is_finite()) {
            return bad("class means must be finite");
        }
        if !(self.class_spread > 0.0 && self.class_spread.is_finite()) {
            return bad("class_spread must be positive");
        }
        for (name, r) in [
            ("flip_rate", self.flip_rate),
            ("structural_rate", self.structural_rate),
            ("content_rate", self.content_rate),
        ] {
            if !(0.0..1.0).contains(&r) {
                return bad(&format!("{name} must lie in [0, 1)"));
            }
        }
        if self.flip_rate + self.structural_rate + self.content_rate >= 1.0 {
            return bad("noise rates must sum to less than 1");
        }
        if !(self.imbalance_ratio >= 1.0 && self.imbalance_ratio.is_finite()) {
            return bad("imbalance_ratio must be >= 1");
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let spec: SynthSpec =
            toml::from_str(text).map_err(|e| Error::invalid(format!("synth spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn class_sizes(&self) -> [usize; 2] {
        let n0 = ((self.n_per_class as f64 / self.imbalance_ratio).round() as usize).max(1);
        [n0, self.n_per_class]
    }
}

/// Injection bookkeeping kept independently of the generated records.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct InjectionTally {
    pub clean: usize,
    pub label_flip: usize,
    pub structural: usize,
    pub content: usize,
}

impl InjectionTally {
    pub fn noisy(&self) -> usize {
        self.label_flip + self.structural + self.content
    }
}

pub fn generate(spec: &SynthSpec) -> Result<Corpus> {
    generate_tallied(spec).map(|(c, _)| c)
}

pub fn generate_tallied(spec: &SynthSpec) -> Result<(Corpus, InjectionTally)> {
    spec.validate()?;
    let mut r = rng::stream(spec.seed, "synth");
    let means = [&spec.class_mean_0, &spec.class_mean_1];
    let midpoint: Vec<f64> = spec
        .class_mean_0
        .iter()
        .zip(&spec.class_mean_1)
        .map(|(a, b)| 0.5 * (a + b))
        .collect();
    let mut tally = InjectionTally::default();
    let mut records: Vec<(Vec<f64>, u8, NoiseKind)> = Vec::new();

    for (class, &count) in spec.class_sizes().iter().enumerate() {
        let other = 1 - class;
        for _ in 0..count {
            let u: f64 = r.random();
            let kind = if u < spec.flip_rate {
                NoiseKind::LabelFlip
            } else if u < spec.flip_rate + spec.structural_rate {
                NoiseKind::StructuralArtifact
            } else if u < spec.flip_rate + spec.structural_rate + spec.content_rate {
                NoiseKind::ContentDensity
            } else {
                NoiseKind::Clean
            };
            let (features, label) = match kind {
                NoiseKind::Clean => (gaussian(&mut r, means[class], spec.class_spread), class),
                NoiseKind::LabelFlip => (gaussian(&mut r, means[class], spec.class_spread), other),
                NoiseKind::StructuralArtifact => (shell(&mut r, &midpoint, spec.class_spread), class),
                NoiseKind::ContentDensity => (
                    gaussian(&mut r, means[other], CONTENT_SPREAD_SCALE * spec.class_spread),
                    class,
                ),
            };
            match kind {
                NoiseKind::Clean => tally.clean += 1,
                NoiseKind::LabelFlip => tally.label_flip += 1,
                NoiseKind::StructuralArtifact => tally.structural += 1,
                NoiseKind::ContentDensity => tally.content += 1,
            }
            records.push((features, label as u8, kind));
        }
    }
    records.shuffle(&mut r);

    let width = records.len().to_string().len().max(6);
    let examples = records
        .into_iter()
        .enumerate()
        .map(|(i, (features, label, kind))| {
            let source = if label == 1 { Source::Wiki } else { Source::Viki };
            Example {
                true_noise: Some(kind),
                ..Example::new(format!("s{i:0width$}"), features, label, source)
            }
        })
        .collect();
    Ok((Corpus::new(examples, spec.dim, Split::Train)?, tally))
}

fn gaussian(r: &mut rng::Rng, mean: &[f64], sd: f64) -> Vec<f64> {
    mean.iter()
        .map(|m| m + sd * r.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Volume-uniform draw in the shell [6, 10]·spread around `center`.
fn shell(r: &mut rng::Rng, center: &[f64], spread: f64) -> Vec<f64> {
    let d = center.len() as i32;
    let mut dir: Vec<f64> = (0..d).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        dir.iter_mut().for_each(|v| *v /= norm);
    } else {
        dir[0] = 1.0;
    }
    let (a, b) = (SHELL_INNER.powi(d), SHELL_OUTER.powi(d));
    let u: f64 = r.random();
    let radius = (a + u * (b - a)).powf(1.0 / f64::from(d)) * spread;
    center.iter().zip(&dir).map(|(c, v)| c + radius * v).collect()
}

/// Ground-truth verdicts: flagged iff the example carries injected noise.
pub fn oracle_verdicts(corpus: &Corpus) -> Result<Vec<NoiseVerdict>> {
    corpus
        .examples()
        .iter()
        .map(|e| {
            let kind = e.true_noise.ok_or_else(|| {
                Error::invalid(format!("example `{}` has no ground-truth noise label", e.id))
            })?;
            let flag = kind.is_noise();
            Ok(NoiseVerdict {
                id: e.id.clone(),
                method: "oracle".into(),
                score: if flag { 1.0 } else { 0.0 },
                flag,
            })
        })
        .collect()
}
