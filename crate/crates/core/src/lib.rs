//! Label-noise detection and denoising for binary sentence-difficulty corpora.
//!
//! Every detector consumes a training [`Corpus`](datamodel::Corpus) and emits one
//! [`NoiseVerdict`](verdict::NoiseVerdict) per example. Verdicts are intersected,
//! used to filter the training split, and the filtered retrains are compared
//! against a noisy baseline on a held-out split.
//!
//! Detectors:
//! - [`gmm`] + [`threshold`]: mixture-density outlier scores with a KDE dip threshold.
//! - [`lossfilters`]: small-loss trick and co-teaching.
//! - [`correction`]: noise transition matrix correction and label smoothing.

pub mod config;
pub mod correction;
pub mod datamodel;
mod error;
pub mod gmm;
pub mod intersect;
pub mod lossfilters;
pub mod metrics;
pub mod numeric;
pub mod pipeline;
pub mod rng;
pub mod synth;
pub mod threshold;
pub mod trainer;
pub mod verdict;

pub use error::{Error, Result};
