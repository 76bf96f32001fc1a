//! Gaussian mixture models fitted by expectation–maximization, and
//! density-based noise scores.
//!
//! Four covariance structures are supported:
//!
//! | type        | parameters per model      |
//! |-------------|---------------------------|
//! | `Full`      | one d×d matrix per component |
//! | `Tied`      | one d×d matrix shared by all |
//! | `Diag`      | one variance vector per component |
//! | `Spherical` | one variance per component |
//!
//! Full and tied densities are evaluated through the inverse Cholesky factor
//! of each covariance. `reg_covar` is added to every covariance diagonal in
//! each M-step. The recorded log-likelihood is the per-sample mean, summed
//! pairwise so the value does not depend on evaluation order.

use std::f64::consts::PI;
use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use nalgebra::{Cholesky, DMatrix};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::numeric::{fmt17, log_sum_exp, pairwise_sum};
use crate::{rng, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovarianceType {
    Full,
    Tied,
    Diag,
    Spherical,
}

impl fmt::Display for CovarianceType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CovarianceType::Full => "full",
            CovarianceType::Tied => "tied",
            CovarianceType::Diag => "diag",
            CovarianceType::Spherical => "spherical",
        })
    }
}

impl FromStr for CovarianceType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(CovarianceType::Full),
            "tied" => Ok(CovarianceType::Tied),
            "diag" => Ok(CovarianceType::Diag),
            "spherical" => Ok(CovarianceType::Spherical),
            other => Err(Error::invalid(format!("unknown covariance type `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmmConfig {
    pub n_components: usize,
    pub covariance_type: CovarianceType,
    pub tol: f64,
    pub max_iter: usize,
    pub reg_covar: f64,
    pub seed: u64,
    pub n_init: usize,
}

impl Default for GmmConfig {
    fn default() -> Self {
        GmmConfig {
            n_components: 9,
            covariance_type: CovarianceType::Full,
            tol: 1e-4,
            max_iter: 200,
            reg_covar: 1e-6,
            seed: 0,
            n_init: 3,
        }
    }
}

impl GmmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_components == 0 || self.n_init == 0 || self.max_iter == 0 {
            return Err(Error::invalid("n_components, n_init and max_iter must be at least 1"));
        }
        if !(self.tol > 0.0) || !(self.reg_covar > 0.0) {
            return Err(Error::invalid("tol and reg_covar must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Covariances {
    Full(Vec<DMatrix<f64>>),
    Tied(DMatrix<f64>),
    Diag(Vec<Vec<f64>>),
    Spherical(Vec<f64>),
}

impl Covariances {
    pub fn kind(&self) -> CovarianceType {
        match self {
            Covariances::Full(_) => CovarianceType::Full,
            Covariances::Tied(_) => CovarianceType::Tied,
            Covariances::Diag(_) => CovarianceType::Diag,
            Covariances::Spherical(_) => CovarianceType::Spherical,
        }
    }

    /// Dense covariance of component `k`.
    pub fn matrix(&self, k: usize, dim: usize) -> DMatrix<f64> {
        match self {
            Covariances::Full(m) => m[k].clone(),
            Covariances::Tied(m) => m.clone(),
            Covariances::Diag(v) => DMatrix::from_diagonal(&v[k].clone().into()),
            Covariances::Spherical(v) => DMatrix::identity(dim, dim) * v[k],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmmModel {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub covariances: Covariances,
    /// Mean per-sample log-likelihood after each E-step; the last entry
    /// belongs to the returned parameters.
    pub log_likelihood: Vec<f64>,
    pub converged: bool,
}

/// Per-component density evaluator: `ln N(x) = log_norm - 0.5 |P (x - mu)|^2`.
enum Precision {
    /// Row-major lower-triangular inverse Cholesky factor.
    Triangular(Vec<f64>),
    InvSd(Vec<f64>),
}

struct Component {
    mean: Vec<f64>,
    log_norm: f64,
    precision: Precision,
}

impl Component {
    fn log_density(&self, x: &[f64]) -> f64 {
        let d = x.len();
        let mut sq = 0.0;
        match &self.precision {
            Precision::Triangular(p) => {
                for r in 0..d {
                    let row = &p[r * d..r * d + r + 1];
                    let y: f64 = row.iter().zip(x).zip(&self.mean).map(|((pv, xv), m)| pv * (xv - m)).sum();
                    sq += y * y;
                }
            }
            Precision::InvSd(s) => {
                for ((xv, m), sv) in x.iter().zip(&self.mean).zip(s) {
                    let y = (xv - m) * sv;
                    sq += y * y;
                }
            }
        }
        self.log_norm - 0.5 * sq
    }
}

fn dense_component(mean: &[f64], cov: &DMatrix<f64>, index: usize) -> Result<Component> {
    let d = mean.len();
    let chol = Cholesky::new(cov.clone()).ok_or(Error::CovarianceCollapse { component: index })?;
    let l = chol.l();
    let log_det: f64 = 2.0 * (0..d).map(|i| l[(i, i)].ln()).sum::<f64>();
    let inv = l
        .solve_lower_triangular(&DMatrix::identity(d, d))
        .ok_or(Error::CovarianceCollapse { component: index })?;
    let mut p = vec![0.0; d * d];
    for r in 0..d {
        for c in 0..=r {
            p[r * d + c] = inv[(r, c)];
        }
    }
    if !log_det.is_finite() || p.iter().any(|v| !v.is_finite()) {
        return Err(Error::CovarianceCollapse { component: index });
    }
    Ok(Component {
        mean: mean.to_vec(),
        log_norm: -0.5 * (d as f64 * (2.0 * PI).ln() + log_det),
        precision: Precision::Triangular(p),
    })
}

fn diag_component(mean: &[f64], var: &[f64], index: usize) -> Result<Component> {
    if var.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(Error::CovarianceCollapse { component: index });
    }
    let d = mean.len();
    let log_det: f64 = var.iter().map(|v| v.ln()).sum();
    Ok(Component {
        mean: mean.to_vec(),
        log_norm: -0.5 * (d as f64 * (2.0 * PI).ln() + log_det),
        precision: Precision::InvSd(var.iter().map(|v| 1.0 / v.sqrt()).collect()),
    })
}

impl GmmModel {
    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    fn components(&self) -> Result<Vec<Component>> {
        let d = self.dim();
        (0..self.n_components())
            .map(|k| match &self.covariances {
                Covariances::Full(m) => dense_component(&self.means[k], &m[k], k),
                Covariances::Tied(m) => dense_component(&self.means[k], m, k),
                Covariances::Diag(v) => diag_component(&self.means[k], &v[k], k),
                Covariances::Spherical(v) => diag_component(&self.means[k], &vec![v[k]; d], k),
            })
            .collect()
    }

    /// `ln p(x)` under the mixture for each row.
    pub fn log_density(&self, rows: &[Vec<f64>]) -> Result<Vec<f64>> {
        check_rows(rows, self.dim())?;
        let comps = self.components()?;
        let log_w: Vec<f64> = self.weights.iter().map(|w| w.ln()).collect();
        let mut buf = vec![0.0; comps.len()];
        Ok(rows
            .iter()
            .map(|x| {
                for (k, c) in comps.iter().enumerate() {
                    buf[k] = log_w[k] + c.log_density(x);
                }
                log_sum_exp(&buf)
            })
            .collect())
    }

    /// Posterior component probabilities for each row.
    pub fn responsibilities(&self, rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        check_rows(rows, self.dim())?;
        let comps = self.components()?;
        let (resp, _) = e_step(rows, &self.weights, &comps);
        Ok(resp)
    }

    /// Plain-text dump: header `K dim type`, then weights, means and covariances.
    pub fn to_text(&self) -> String {
        let d = self.dim();
        let mut s = format!("{} {} {}\n", self.n_components(), d, self.covariances.kind());
        let line = |v: &[f64]| v.iter().map(|&x| fmt17(x)).collect::<Vec<_>>().join(" ");
        writeln!(s, "{}", line(&self.weights)).unwrap();
        for m in &self.means {
            writeln!(s, "{}", line(m)).unwrap();
        }
        let matrix = |s: &mut String, m: &DMatrix<f64>| {
            for r in 0..d {
                let row: Vec<f64> = (0..d).map(|c| m[(r, c)]).collect();
                writeln!(s, "{}", line(&row)).unwrap();
            }
        };
        match &self.covariances {
            Covariances::Full(ms) => ms.iter().for_each(|m| matrix(&mut s, m)),
            Covariances::Tied(m) => matrix(&mut s, m),
            Covariances::Diag(vs) => vs.iter().for_each(|v| writeln!(s, "{}", line(v)).unwrap()),
            Covariances::Spherical(v) => writeln!(s, "{}", line(v)).unwrap(),
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

fn check_rows(rows: &[Vec<f64>], dim: usize) -> Result<()> {
    for r in rows {
        if r.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: r.len(),
            });
        }
        if r.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("features must be finite"));
        }
    }
    Ok(())
}

/// Responsibilities and the mean log-likelihood.
fn e_step(rows: &[Vec<f64>], weights: &[f64], comps: &[Component]) -> (Vec<Vec<f64>>, f64) {
    let log_w: Vec<f64> = weights.iter().map(|w| w.ln()).collect();
    let mut lse = Vec::with_capacity(rows.len());
    let resp = rows
        .iter()
        .map(|x| {
            let lp: Vec<f64> = comps
                .iter()
                .zip(&log_w)
                .map(|(c, lw)| lw + c.log_density(x))
                .collect();
            let norm = log_sum_exp(&lp);
            lse.push(norm);
            lp.into_iter().map(|v| (v - norm).exp()).collect()
        })
        .collect();
    (resp, pairwise_sum(&lse) / rows.len() as f64)
}

fn m_step(rows: &[Vec<f64>], resp: &[Vec<f64>], kind: CovarianceType, reg: f64) -> (Vec<f64>, Vec<Vec<f64>>, Covariances) {
    let n = rows.len();
    let d = rows[0].len();
    let k = resp[0].len();
    let nk: Vec<f64> = (0..k)
        .map(|j| {
            let col: Vec<f64> = resp.iter().map(|r| r[j]).collect();
            pairwise_sum(&col) + 10.0 * f64::EPSILON
        })
        .collect();
    let total: f64 = nk.iter().sum();
    let weights: Vec<f64> = nk.iter().map(|v| v / total).collect();
    let means: Vec<Vec<f64>> = (0..k)
        .map(|j| {
            let mut m = vec![0.0; d];
            for (x, r) in rows.iter().zip(resp) {
                for (mv, xv) in m.iter_mut().zip(x) {
                    *mv += r[j] * xv;
                }
            }
            m.iter_mut().for_each(|v| *v /= nk[j]);
            m
        })
        .collect();

    // Weighted scatter of component j, not yet normalized.
    let scatter = |j: usize| {
        let mut s = DMatrix::<f64>::zeros(d, d);
        let mut diff = vec![0.0; d];
        for (x, r) in rows.iter().zip(resp) {
            let w = r[j];
            for ((dv, xv), mv) in diff.iter_mut().zip(x).zip(&means[j]) {
                *dv = xv - mv;
            }
            for a in 0..d {
                let wa = w * diff[a];
                for b in 0..=a {
                    s[(a, b)] += wa * diff[b];
                }
            }
        }
        for a in 0..d {
            for b in 0..a {
                s[(b, a)] = s[(a, b)];
            }
        }
        s
    };
    let diag_var = |j: usize| -> Vec<f64> {
        (0..d)
            .map(|a| {
                let mut acc = 0.0;
                for (x, r) in rows.iter().zip(resp) {
                    let dv = x[a] - means[j][a];
                    acc += r[j] * dv * dv;
                }
                acc / nk[j] + reg
            })
            .collect()
    };
    let covariances = match kind {
        CovarianceType::Full => Covariances::Full(
            (0..k)
                .map(|j| {
                    let mut s = scatter(j) / nk[j];
                    for a in 0..d {
                        s[(a, a)] += reg;
                    }
                    s
                })
                .collect(),
        ),
        CovarianceType::Tied => {
            let mut s = DMatrix::<f64>::zeros(d, d);
            for j in 0..k {
                s += scatter(j);
            }
            s /= n as f64;
            for a in 0..d {
                s[(a, a)] += reg;
            }
            Covariances::Tied(s)
        }
        CovarianceType::Diag => Covariances::Diag((0..k).map(diag_var).collect()),
        CovarianceType::Spherical => Covariances::Spherical(
            (0..k)
                .map(|j| {
                    let v = diag_var(j);
                    // diag_var already added reg to each entry
                    v.iter().sum::<f64>() / d as f64
                })
                .collect(),
        ),
    };
    (weights, means, covariances)
}

/// D²-weighted seeding. Draws are `floor(u · n)` and a cumulative-weight scan,
/// so repeating every row in place leaves the chosen points unchanged.
fn kmeans_pp_seeds(rows: &[Vec<f64>], k: usize, r: &mut rng::Rng) -> Vec<Vec<f64>> {
    let n = rows.len();
    let sqdist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let first = ((r.random::<f64>() * n as f64) as usize).min(n - 1);
    let mut centers = vec![rows[first].clone()];
    let mut dist: Vec<f64> = rows.iter().map(|x| sqdist(x, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = dist.iter().sum();
        let next = if total > 0.0 {
            let target = r.random::<f64>() * total;
            let mut cum = 0.0;
            let mut pick = n - 1;
            for (i, dv) in dist.iter().enumerate() {
                cum += dv;
                if cum > target {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            ((r.random::<f64>() * n as f64) as usize).min(n - 1)
        };
        centers.push(rows[next].clone());
        for (dv, x) in dist.iter_mut().zip(rows) {
            *dv = dv.min(sqdist(x, &centers[centers.len() - 1]));
        }
    }
    centers
}

fn initial_covariances(rows: &[Vec<f64>], k: usize, kind: CovarianceType, reg: f64) -> Covariances {
    let n = rows.len() as f64;
    let d = rows[0].len();
    let mean: Vec<f64> = (0..d).map(|a| rows.iter().map(|x| x[a]).sum::<f64>() / n).collect();
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for x in rows {
        for a in 0..d {
            for b in 0..d {
                cov[(a, b)] += (x[a] - mean[a]) * (x[b] - mean[b]);
            }
        }
    }
    cov /= n;
    for a in 0..d {
        cov[(a, a)] += reg;
    }
    let var: Vec<f64> = (0..d).map(|a| cov[(a, a)]).collect();
    match kind {
        CovarianceType::Full => Covariances::Full(vec![cov; k]),
        CovarianceType::Tied => Covariances::Tied(cov),
        CovarianceType::Diag => Covariances::Diag(vec![var; k]),
        CovarianceType::Spherical => Covariances::Spherical(vec![var.iter().sum::<f64>() / d as f64; k]),
    }
}

fn fit_once(rows: &[Vec<f64>], config: &GmmConfig, seed: u64) -> Result<GmmModel> {
    let k = config.n_components;
    let mut r = rng::from_seed(seed);
    let mut model = GmmModel {
        weights: vec![1.0 / k as f64; k],
        means: kmeans_pp_seeds(rows, k, &mut r),
        covariances: initial_covariances(rows, k, config.covariance_type, config.reg_covar),
        log_likelihood: Vec::new(),
        converged: false,
    };
    for iter in 0..=config.max_iter {
        let comps = model.components()?;
        let (resp, ll) = e_step(rows, &model.weights, &comps);
        if !ll.is_finite() {
            return Err(Error::invalid("log-likelihood became non-finite"));
        }
        model.log_likelihood.push(ll);
        if let [.., prev, last] = model.log_likelihood[..] {
            if last - prev < config.tol {
                model.converged = true;
                break;
            }
        }
        if iter == config.max_iter {
            break;
        }
        let (w, m, c) = m_step(rows, &resp, config.covariance_type, config.reg_covar);
        model.weights = w;
        model.means = m;
        model.covariances = c;
    }
    Ok(model)
}

/// Every restart's fitted model, in restart order.
pub fn fit_candidates(rows: &[Vec<f64>], config: &GmmConfig) -> Result<Vec<GmmModel>> {
    config.validate()?;
    if rows.len() < config.n_components {
        return Err(Error::invalid(format!(
            "{} samples cannot support {} components",
            rows.len(),
            config.n_components
        )));
    }
    check_rows(rows, rows[0].len())?;
    (0..config.n_init)
        .map(|i| fit_once(rows, config, rng::derive_seed(config.seed, &format!("gmm-init-{i}"))))
        .collect()
}

/// Best restart by final log-likelihood (earliest wins ties).
pub fn fit(rows: &[Vec<f64>], config: &GmmConfig) -> Result<GmmModel> {
    let mut best: Option<GmmModel> = None;
    for m in fit_candidates(rows, config)? {
        let better = match &best {
            None => true,
            Some(b) => m.log_likelihood.last() > b.log_likelihood.last(),
        };
        if better {
            best = Some(m);
        }
    }
    Ok(best.expect("n_init >= 1"))
}

/// Negative log-density min-max normalized over the batch; a constant batch
/// scores 0.5 everywhere. Higher is more noise-like.
pub fn score_noise(model: &GmmModel, rows: &[Vec<f64>]) -> Result<Vec<f64>> {
    let raw: Vec<f64> = model.log_density(rows)?.into_iter().map(|v| -v).collect();
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Ok(vec![0.5; raw.len()]);
    }
    Ok(raw.iter().map(|v| (v - lo) / (hi - lo)).collect())
}
