//! Gaussian kernel density estimates over noise scores and the dip-between-peaks
//! threshold.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::numeric::{fmt17, quantile, quantile_sorted, std_dev};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bandwidth {
    Silverman,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KdeConfig {
    pub bandwidth: Bandwidth,
    pub grid_points: usize,
    pub fallback_quantile: f64,
}

impl Default for KdeConfig {
    fn default() -> Self {
        KdeConfig {
            bandwidth: Bandwidth::Silverman,
            grid_points: 512,
            fallback_quantile: 0.90,
        }
    }
}

impl KdeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_points < 16 {
            return Err(Error::invalid("grid_points must be at least 16"));
        }
        if let Bandwidth::Fixed(h) = self.bandwidth {
            if !(h > 0.0) || !h.is_finite() {
                return Err(Error::invalid("fixed bandwidth must be positive"));
            }
        }
        if !(self.fallback_quantile > 0.0 && self.fallback_quantile < 1.0) {
            return Err(Error::invalid("fallback_quantile must lie in (0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensityCurve {
    pub xs: Vec<f64>,
    pub density: Vec<f64>,
    pub bandwidth: f64,
}

impl DensityCurve {
    /// Two-column `x density` text.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (x, d) in self.xs.iter().zip(&self.density) {
            writeln!(s, "{} {}", fmt17(*x), fmt17(*d)).unwrap();
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    /// Grid indices of local maxima. A plateau counts once, at its first index.
    pub fn local_maxima(&self) -> Vec<usize> {
        let d = &self.density;
        let mut out = Vec::new();
        let mut i = 1;
        while i + 1 < d.len() {
            if d[i] > d[i - 1] {
                let start = i;
                while i + 1 < d.len() && d[i + 1] == d[i] {
                    i += 1;
                }
                if i + 1 < d.len() && d[i + 1] < d[i] {
                    out.push(start);
                }
            }
            i += 1;
        }
        out
    }

    /// Trapezoidal integral of the curve.
    pub fn integral(&self) -> f64 {
        self.xs
            .windows(2)
            .zip(self.density.windows(2))
            .map(|(x, d)| 0.5 * (x[1] - x[0]) * (d[0] + d[1]))
            .sum()
    }
}

/// `0.9 · min(sd, IQR/1.34) · n^(-1/5)`.
pub fn silverman_bandwidth(scores: &[f64]) -> f64 {
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let iqr = quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25);
    0.9 * std_dev(scores).min(iqr / 1.34) * (scores.len() as f64).powf(-0.2)
}

pub fn kde(scores: &[f64], config: &KdeConfig) -> Result<DensityCurve> {
    config.validate()?;
    if scores.len() < 2 {
        return Err(Error::invalid("kde needs at least two scores"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::invalid("scores must be finite"));
    }
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if lo == hi {
        return Err(Error::ZeroVariance);
    }
    let h = match config.bandwidth {
        Bandwidth::Silverman => silverman_bandwidth(scores),
        Bandwidth::Fixed(h) => h,
    };
    if !(h > 0.0) {
        return Err(Error::ZeroVariance);
    }
    let (start, end) = (lo - 3.0 * h, hi + 3.0 * h);
    let g = config.grid_points;
    let step = (end - start) / (g - 1) as f64;
    let norm = 1.0 / (scores.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
    let xs: Vec<f64> = (0..g).map(|i| start + step * i as f64).collect();
    let density = xs
        .iter()
        .map(|&x| {
            norm * scores
                .iter()
                .map(|&s| {
                    let u = (x - s) / h;
                    (-0.5 * u * u).exp()
                })
                .sum::<f64>()
        })
        .collect();
    Ok(DensityCurve { xs, density, bandwidth: h })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ThresholdMode {
    Dip,
    FallbackQuantile,
}

/// Density minimum between the two highest KDE peaks, or the fallback quantile
/// when the curve has fewer than two peaks or cannot be built.
pub fn dip_threshold(scores: &[f64], config: &KdeConfig) -> Result<(f64, ThresholdMode)> {
    config.validate()?;
    if scores.len() < 2 {
        return Err(Error::invalid("threshold needs at least two scores"));
    }
    let fallback = || Ok((quantile(scores, config.fallback_quantile), ThresholdMode::FallbackQuantile));
    let curve = match kde(scores, config) {
        Ok(c) => c,
        Err(Error::ZeroVariance) => return fallback(),
        Err(e) => return Err(e),
    };
    let mut peaks = curve.local_maxima();
    if peaks.len() < 2 {
        return fallback();
    }
    // Highest first; equal heights keep grid order.
    peaks.sort_by(|&a, &b| curve.density[b].total_cmp(&curve.density[a]));
    let (a, b) = (peaks[0].min(peaks[1]), peaks[0].max(peaks[1]));
    let dip = (a + 1..b)
        .min_by(|&i, &j| curve.density[i].total_cmp(&curve.density[j]))
        .expect("two distinct local maxima have a grid point between them");
    Ok((curve.xs[dip], ThresholdMode::Dip))
}

/// Strictly above the threshold.
pub fn flag(scores: &[f64], threshold: f64) -> Vec<bool> {
    scores.iter().map(|&s| s > threshold).collect()
}
