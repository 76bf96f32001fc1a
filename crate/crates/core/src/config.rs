//! Pipeline configuration files.
//!
//! A config is TOML: top-level keys plus one table per component. Every key
//! has a default, so an empty file is a valid config. Values are resolved in
//! three layers, later ones winning:
//!
//! 1. built-in defaults,
//! 2. the config file,
//! 3. `section.key=value` overrides (values parse as TOML, falling back to a
//!    bare string).
//!
//! ```toml
//! seed = 7
//! outdir = "out/demo"
//! methods = ["gmm", "st", "ct", "ls", "ntm", "oracle"]
//! intersections = [["ct", "ntm", "gmm"]]
//!
//! [synth]
//! flip_rate = 0.1
//!
//! [trainer]
//! epochs = 10
//! ```
//!
//! When `corpus` is set the corpus is read from that JSON-lines file and the
//! `[synth]` table is ignored. Otherwise a synthetic corpus is generated with
//! the run seed in place of `synth.seed`.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::correction::{SmoothingConfig, TransitionMatrix};
use crate::gmm::{CovarianceType, GmmConfig};
use crate::lossfilters::{CtConfig, FlagRule, StConfig};
use crate::synth::SynthSpec;
use crate::threshold::{Bandwidth, KdeConfig};
use crate::trainer::{LossMode, TrainConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Gmm,
    St,
    Ct,
    Ls,
    Ntm,
    Oracle,
}

impl Method {
    pub const ALL: [Method; 6] = [Method::Gmm, Method::St, Method::Ct, Method::Ls, Method::Ntm, Method::Oracle];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Gmm => "gmm",
            Method::St => "st",
            Method::Ct => "ct",
            Method::Ls => "ls",
            Method::Ntm => "ntm",
            Method::Oracle => "oracle",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::UnknownMethod(s.to_owned()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub shuffle: bool,
}

impl Default for TrainerSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainerSection {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            shuffle: t.shuffle,
        }
    }
}

impl TrainerSection {
    pub fn build(&self, seed: u64, loss_mode: LossMode) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            seed,
            loss_mode,
            shuffle: self.shuffle,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GmmSection {
    pub n_components: usize,
    pub covariance_type: CovarianceType,
    pub tol: f64,
    pub max_iter: usize,
    pub reg_covar: f64,
    pub n_init: usize,
}

impl Default for GmmSection {
    fn default() -> Self {
        let g = GmmConfig::default();
        GmmSection {
            n_components: g.n_components,
            covariance_type: g.covariance_type,
            tol: g.tol,
            max_iter: g.max_iter,
            reg_covar: g.reg_covar,
            n_init: g.n_init,
        }
    }
}

impl GmmSection {
    pub fn build(&self, seed: u64) -> GmmConfig {
        GmmConfig {
            n_components: self.n_components,
            covariance_type: self.covariance_type,
            tol: self.tol,
            max_iter: self.max_iter,
            reg_covar: self.reg_covar,
            seed,
            n_init: self.n_init,
        }
    }
}

/// `bandwidth` is `"silverman"` or a positive number.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KdeSection {
    pub bandwidth: BandwidthSetting,
    pub grid_points: usize,
    pub fallback_quantile: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BandwidthSetting {
    Fixed(f64),
    Named(String),
}

impl Default for KdeSection {
    fn default() -> Self {
        let k = KdeConfig::default();
        KdeSection {
            bandwidth: BandwidthSetting::Named("silverman".into()),
            grid_points: k.grid_points,
            fallback_quantile: k.fallback_quantile,
        }
    }
}

impl KdeSection {
    pub fn build(&self) -> Result<KdeConfig> {
        let bandwidth = match &self.bandwidth {
            BandwidthSetting::Fixed(h) => Bandwidth::Fixed(*h),
            BandwidthSetting::Named(s) if s == "silverman" => Bandwidth::Silverman,
            BandwidthSetting::Named(s) => return Err(Error::invalid(format!("unknown bandwidth `{s}`"))),
        };
        let k = KdeConfig {
            bandwidth,
            grid_points: self.grid_points,
            fallback_quantile: self.fallback_quantile,
        };
        k.validate()?;
        Ok(k)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StSection {
    pub retain_percentile: f64,
    pub epochs: usize,
}

impl Default for StSection {
    fn default() -> Self {
        let s = StConfig::default();
        StSection {
            retain_percentile: s.retain_percentile,
            epochs: s.epochs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CtSection {
    pub r_min: f64,
    pub r_max: f64,
    pub epochs: usize,
    pub flag_rule: FlagRule,
}

impl Default for CtSection {
    fn default() -> Self {
        let c = CtConfig::default();
        CtSection {
            r_min: c.r_min,
            r_max: c.r_max,
            epochs: c.epochs,
            flag_rule: c.flag_rule,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LsSection {
    pub epsilon: f64,
    pub tau: f64,
}

impl Default for LsSection {
    fn default() -> Self {
        let s = SmoothingConfig::default();
        LsSection {
            epsilon: s.epsilon,
            tau: s.tau,
        }
    }
}

/// Where the noise transition matrix comes from: estimated from the GMM flags
/// on the training split, or a given symmetric flip rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NtmSection {
    pub symmetric_rate: Option<f64>,
}

impl Default for NtmSection {
    fn default() -> Self {
        NtmSection { symmetric_rate: None }
    }
}

impl NtmSection {
    /// `None` means estimate from GMM flags.
    pub fn given_matrix(&self) -> Result<Option<TransitionMatrix>> {
        self.symmetric_rate.map(TransitionMatrix::symmetric).transpose()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: Option<u64>,
    pub outdir: PathBuf,
    /// JSON-lines corpus; a synthetic corpus is generated when absent.
    pub corpus: Option<PathBuf>,
    pub methods: Vec<Method>,
    /// Train and evaluate the unfiltered model.
    pub baseline: bool,
    /// Method subsets whose joint flags are filtered out and retrained on.
    pub intersections: Vec<Vec<Method>>,
    pub test_fraction: f64,
    /// Keep injected-noise examples in the synthetic test split.
    pub keep_noisy_test: bool,
    pub synth: SynthSpec,
    pub trainer: TrainerSection,
    pub gmm: GmmSection,
    pub kde: KdeSection,
    pub st: StSection,
    pub ct: CtSection,
    pub ls: LsSection,
    pub ntm: NtmSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: None,
            outdir: PathBuf::from("out"),
            corpus: None,
            methods: Vec::new(),
            baseline: true,
            intersections: Vec::new(),
            test_fraction: 0.2,
            keep_noisy_test: false,
            synth: SynthSpec::demo(0),
            trainer: TrainerSection::default(),
            gmm: GmmSection::default(),
            kde: KdeSection::default(),
            st: StSection::default(),
            ct: CtSection::default(),
            ls: LsSection::default(),
            ntm: NtmSection::default(),
        }
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn parse_override(raw: &str) -> Result<(Vec<String>, toml::Value)> {
    let raw = raw.strip_prefix("--").unwrap_or(raw);
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| Error::invalid(format!("override `{raw}` is not key=value")))?;
    let path: Vec<String> = key.split('.').map(str::to_owned).collect();
    if path.iter().any(String::is_empty) {
        return Err(Error::invalid(format!("malformed override key `{key}`")));
    }
    let value = match toml::from_str::<toml::Table>(&format!("v = {value}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(value.to_owned()),
    };
    Ok((path, value))
}

fn set_path(table: &mut toml::Table, path: &[String], value: toml::Value) -> Result<()> {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::invalid(format!("`{p}` is not a section")))?;
    }
    cur.insert(last.clone(), value);
    Ok(())
}

impl PipelineConfig {
    /// Resolves defaults, file text and overrides into a validated config.
    pub fn resolve(file_text: Option<&str>, overrides: &[String]) -> Result<Self> {
        let mut table = toml::Table::try_from(PipelineConfig::default())
            .map_err(|e| Error::invalid(format!("default config: {e}")))?;
        if let Some(text) = file_text {
            let file: toml::Table = toml::from_str(text).map_err(|e| Error::invalid(format!("config: {e}")))?;
            merge(&mut table, file);
        }
        for raw in overrides {
            let (path, value) = parse_override(raw)?;
            set_path(&mut table, &path, value)?;
        }
        let cfg: PipelineConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::invalid(format!("config: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::resolve(Some(&text), overrides)
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() && !self.baseline {
            return Err(Error::invalid("enable at least one method or the baseline"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for m in &self.methods {
            if !seen.insert(m) {
                return Err(Error::invalid(format!("method `{m}` listed twice")));
            }
        }
        for subset in &self.intersections {
            if subset.is_empty() {
                return Err(Error::invalid("empty intersection"));
            }
            if let Some(m) = subset.iter().find(|m| !self.methods.contains(m)) {
                return Err(Error::invalid(format!("intersection uses disabled method `{m}`")));
            }
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::invalid("test_fraction must lie in (0, 1)"));
        }
        if self.corpus.is_none() {
            self.synth.validate()?;
        }
        self.trainer.build(0, LossMode::Plain).validate()?;
        self.gmm.build(0).validate()?;
        self.kde.build()?;
        self.st_config(0).validate()?;
        self.ct_config(0).validate()?;
        self.ls_config().validate()?;
        self.ntm.given_matrix()?;
        Ok(())
    }

    pub fn st_config(&self, seed: u64) -> StConfig {
        StConfig {
            retain_percentile: self.st.retain_percentile,
            epochs: self.st.epochs,
            trainer: self.trainer.build(seed, LossMode::Plain),
        }
    }

    pub fn ct_config(&self, seed: u64) -> CtConfig {
        CtConfig {
            r_min: self.ct.r_min,
            r_max: self.ct.r_max,
            epochs: self.ct.epochs,
            flag_rule: self.ct.flag_rule,
            identical_peers: false,
            trainer: self.trainer.build(seed, LossMode::Plain),
        }
    }

    pub fn ls_config(&self) -> SmoothingConfig {
        SmoothingConfig {
            epsilon: self.ls.epsilon,
            tau: self.ls.tau,
            ..SmoothingConfig::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn resolve(text: &str, overrides: &[&str]) -> Result<PipelineConfig> {
        let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
        PipelineConfig::resolve(Some(text), &o)
    }

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(resolve("", &[]).unwrap(), PipelineConfig::default());
    }

    #[test]
    fn file_and_overrides_layer() {
        let text = "seed = 4\nmethods = [\"gmm\", \"ct\"]\n[trainer]\nepochs = 3\n[gmm]\ncovariance_type = \"tied\"\n";
        let c = resolve(text, &["--trainer.epochs=7", "gmm.n_components=2", "seed=9", "outdir=/tmp/x"]).unwrap();
        assert_eq!(c.seed, Some(9));
        assert_eq!(c.trainer.epochs, 7);
        assert_eq!(c.gmm.n_components, 2);
        assert_eq!(c.gmm.covariance_type, CovarianceType::Tied);
        assert_eq!(c.methods, [Method::Gmm, Method::Ct]);
        assert_eq!(c.outdir, PathBuf::from("/tmp/x"));
        // Untouched keys keep their defaults.
        assert_eq!(c.trainer.batch_size, 64);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(resolve("bogus = 1", &[]).is_err());
        assert!(resolve("[gmm]\nbogus = 1", &[]).is_err());
        assert!(resolve("", &["trainer.bogus=1"]).is_err());
        assert!(resolve("methods = [\"nope\"]", &[]).is_err());
        assert!(resolve("", &["trainer.epochs=0"]).is_err());
        assert!(resolve("", &["noequals"]).is_err());
    }

    #[test]
    fn intersections_need_enabled_methods() {
        assert!(resolve("methods = [\"gmm\"]\nintersections = [[\"gmm\", \"ct\"]]", &[]).is_err());
        assert!(resolve("methods = [\"gmm\", \"ct\"]\nintersections = [[\"gmm\", \"ct\"]]", &[]).is_ok());
    }

    #[test]
    fn nothing_enabled_is_invalid() {
        assert!(resolve("baseline = false", &[]).is_err());
    }

    #[test]
    fn bandwidth_setting() {
        let c = resolve("[kde]\nbandwidth = 0.05", &[]).unwrap();
        assert_eq!(c.kde.build().unwrap().bandwidth, Bandwidth::Fixed(0.05));
        assert!(resolve("[kde]\nbandwidth = \"scott\"", &[]).is_err());
    }
}
