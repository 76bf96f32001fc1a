//! Corpus types, JSON-lines serialization and corpus statistics.
//!
//! A corpus file holds one JSON object per line:
//!
//! ```text
//! {"id":"s1","features":[0.1,-2.0],"label":1,"source":"wiki","text":"A sentence ."}
//! ```
//!
//! Optional keys (`lang`, `text`, `true_noise`) are omitted when absent and
//! unknown keys are rejected.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize, Serializer};

use crate::numeric::quantile_sorted;
use crate::{rng, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Wiki,
    Viki,
    Synthetic,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::Wiki => "wiki",
            Source::Viki => "viki",
            Source::Synthetic => "synthetic",
        }
    }

    /// Label implied by provenance: Wikipedia is complex, Vikidia simple.
    pub fn implied_label(self) -> Option<u8> {
        match self {
            Source::Wiki => Some(1),
            Source::Viki => Some(0),
            Source::Synthetic => None,
        }
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Ground-truth noise category, only known for generated corpora.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum NoiseKind {
    #[serde(rename = "clean")]
    Clean,
    #[serde(rename = "label_flip")]
    LabelFlip,
    #[serde(rename = "structural")]
    StructuralArtifact,
    #[serde(rename = "content")]
    ContentDensity,
}

impl NoiseKind {
    pub fn is_noise(self) -> bool {
        self != NoiseKind::Clean
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One sentence record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Example {
    pub id: String,
    pub features: Vec<f64>,
    /// 0 = simple, 1 = complex.
    pub label: u8,
    pub source: Source,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lang: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_noise: Option<NoiseKind>,
}

impl Example {
    pub fn new(id: impl Into<String>, features: Vec<f64>, label: u8, source: Source) -> Self {
        Example {
            id: id.into(),
            features,
            label,
            source,
            lang: None,
            text: None,
            true_noise: None,
        }
    }

    fn validate(&self, dim: usize) -> Result<()> {
        if self.features.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: self.features.len(),
            });
        }
        if self.features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(self.id.clone()));
        }
        if self.label > 1 {
            return Err(Error::invalid(format!(
                "example `{}` has label {}, expected 0 or 1",
                self.id, self.label
            )));
        }
        if let Some(implied) = self.source.implied_label() {
            if implied != self.label {
                return Err(Error::invalid(format!(
                    "example `{}` from {} must carry label {}",
                    self.id, self.source, implied
                )));
            }
        }
        Ok(())
    }
}

/// An ordered, validated collection of examples sharing one feature dimension.
/// Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    examples: Vec<Example>,
    dim: usize,
    split: Split,
}

impl Corpus {
    pub fn new(examples: Vec<Example>, dim: usize, split: Split) -> Result<Self> {
        let mut seen = HashSet::with_capacity(examples.len());
        for ex in &examples {
            ex.validate(dim)?;
            if !seen.insert(ex.id.as_str()) {
                return Err(Error::DuplicateId(ex.id.clone()));
            }
        }
        Ok(Corpus {
            examples,
            dim,
            split,
        })
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn into_examples(self) -> Vec<Example> {
        self.examples
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.examples.iter().map(|e| e.label).collect()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.examples.iter().map(|e| e.id.as_str())
    }

    /// Row-major copy of the feature matrix.
    pub fn feature_rows(&self) -> Vec<Vec<f64>> {
        self.examples.iter().map(|e| e.features.clone()).collect()
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    /// Keeps the examples whose mask entry is `true`, preserving order.
    pub fn retain_mask(&self, keep: &[bool]) -> Result<Corpus> {
        if keep.len() != self.len() {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                got: keep.len(),
            });
        }
        let examples = self
            .examples
            .iter()
            .zip(keep)
            .filter(|(_, &k)| k)
            .map(|(e, _)| e.clone())
            .collect();
        Ok(Corpus {
            examples,
            dim: self.dim,
            split: self.split,
        })
    }

    /// Counts of label 0 and label 1.
    pub fn class_counts(&self) -> [usize; 2] {
        let mut c = [0usize; 2];
        for e in &self.examples {
            c[usize::from(e.label)] += 1;
        }
        c
    }
}

fn parse_line(line: &str, lineno: usize) -> Result<Example> {
    match serde_json::from_str::<Example>(line) {
        Ok(ex) => Ok(ex),
        Err(err) => {
            // JSON has no NaN/Infinity literals; recover the id so the error names it.
            if let Some(id) = non_finite_record_id(line) {
                return Err(Error::NonFinite(id));
            }
            Err(Error::Parse {
                line: lineno,
                message: err.to_string(),
            })
        }
    }
}

fn non_finite_record_id(line: &str) -> Option<String> {
    if !["NaN", "Infinity"].iter().any(|t| line.contains(t)) {
        return None;
    }
    let patched = line
        .replace("-Infinity", "null")
        .replace("Infinity", "null")
        .replace("NaN", "null");
    let value: serde_json::Value = serde_json::from_str(&patched).ok()?;
    value.get("id")?.as_str().map(str::to_owned)
}

/// Reads a JSON-lines corpus. Blank lines are skipped; line numbers in errors
/// are 1-based.
pub fn load_corpus(path: &Path, expected_dim: Option<usize>) -> Result<Corpus> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut examples = Vec::new();
    let mut dim = expected_dim;
    let mut seen = HashSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let ex = parse_line(&line, i + 1)?;
        let d = *dim.get_or_insert(ex.features.len());
        ex.validate(d).map_err(|err| match err {
            Error::DimensionMismatch { .. } | Error::Invalid(_) => Error::Parse {
                line: i + 1,
                message: err.to_string(),
            },
            other => other,
        })?;
        if !seen.insert(ex.id.clone()) {
            return Err(Error::DuplicateId(ex.id));
        }
        examples.push(ex);
    }
    let dim = dim.ok_or_else(|| {
        Error::invalid(format!(
            "{} holds no records and no dimension was given",
            path.display()
        ))
    })?;
    Ok(Corpus {
        examples,
        dim,
        split: Split::Train,
    })
}

pub fn save_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for ex in &corpus.examples {
        let line = serde_json::to_string(ex).expect("examples always serialize");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Seeded split holding out `test_fraction` of each label class.
pub fn stratified_split(corpus: &Corpus, test_fraction: f64, seed: u64) -> (Corpus, Corpus) {
    let mut is_test = vec![false; corpus.len()];
    let mut r = rng::stream(seed, "stratified-split");
    for label in 0..=1u8 {
        let mut idx: Vec<usize> = (0..corpus.len())
            .filter(|&i| corpus.examples[i].label == label)
            .collect();
        idx.shuffle(&mut r);
        let n_test = (idx.len() as f64 * test_fraction).round() as usize;
        for &i in &idx[..n_test] {
            is_test[i] = true;
        }
    }
    let pick = |want: bool| Corpus {
        examples: corpus
            .examples
            .iter()
            .zip(&is_test)
            .filter(|(_, &t)| t == want)
            .map(|(e, _)| e.clone())
            .collect(),
        dim: corpus.dim,
        split: if want { Split::Test } else { Split::Train },
    };
    (pick(false), pick(true))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SourceStats {
    pub n_sentences: usize,
    /// Whitespace-token total over records that carry text.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_words: Option<usize>,
    /// (q25, q75) of sentence length in words.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub length_iqr: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorpusStats {
    pub per_source: BTreeMap<Source, SourceStats>,
    pub n_label0: usize,
    pub n_label1: usize,
    /// #label-1 / #label-0; infinite when no label-0 example exists, absent
    /// for an empty corpus.
    #[serde(serialize_with = "ser_ratio")]
    pub class_ratio: Option<f64>,
}

fn ser_ratio<S: Serializer>(r: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match r {
        Some(v) if v.is_infinite() => s.serialize_str("inf"),
        Some(v) => s.serialize_f64(*v),
        None => s.serialize_none(),
    }
}

pub fn corpus_stats(corpus: &Corpus) -> CorpusStats {
    let mut lengths: BTreeMap<Source, Vec<f64>> = BTreeMap::new();
    let mut per_source: BTreeMap<Source, SourceStats> = BTreeMap::new();
    for ex in &corpus.examples {
        let entry = per_source.entry(ex.source).or_insert(SourceStats {
            n_sentences: 0,
            n_words: None,
            length_iqr: None,
        });
        entry.n_sentences += 1;
        if let Some(text) = &ex.text {
            let words = text.split_whitespace().count();
            *entry.n_words.get_or_insert(0) += words;
            lengths.entry(ex.source).or_default().push(words as f64);
        }
    }
    for (source, mut lens) in lengths {
        lens.sort_by(f64::total_cmp);
        if let Some(s) = per_source.get_mut(&source) {
            s.length_iqr = Some((quantile_sorted(&lens, 0.25), quantile_sorted(&lens, 0.75)));
        }
    }
    let [n_label0, n_label1] = corpus.class_counts();
    let class_ratio = match (n_label0, n_label1) {
        (0, 0) => None,
        (0, _) => Some(f64::INFINITY),
        (n0, n1) => Some(n1 as f64 / n0 as f64),
    };
    CorpusStats {
        per_source,
        n_label0,
        n_label1,
        class_ratio,
    }
}
