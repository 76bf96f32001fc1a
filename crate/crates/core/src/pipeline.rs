//! End-to-end runs: split, detect, intersect, filter, retrain, evaluate.
//!
//! Artifacts land under `<outdir>/<stage>/`:
//!
//! | stage       | files |
//! |-------------|-------|
//! | `data`      | `train.jsonl`, `test.jsonl` |
//! | `detect`    | `<method>.tsv` verdicts, `gmm_model.txt`, `gmm_threshold.json`, `kde_curve.txt`, `transition.txt` |
//! | `intersect` | `upset.tsv`, `mcc.tsv` |
//! | `train`     | `<model>.model` checkpoints |
//! | `eval`      | `<model>.json` |
//! | `report`    | `report.json` |
//!
//! Detectors only ever see the training split. If a stage fails, the stage
//! directories written by the run are removed.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::{Method, PipelineConfig};
use crate::correction::{estimate_transition, ls_detect, ntm_detect, TransitionMatrix};
use crate::datamodel::{load_corpus, save_corpus, stratified_split, Corpus, NoiseKind, Source};
use crate::gmm::{self, GmmModel};
use crate::intersect::{intersect_flags, mcc_matrix, upset_table, upset_to_tsv, UpsetRow, VerdictSet, MAX_UPSET_METHODS};
use crate::lossfilters::{co_teaching, small_loss_trick};
use crate::metrics::{composition, evaluate, EvalReport};
use crate::numeric::fmt17;
use crate::synth::{generate, oracle_verdicts};
use crate::threshold::{dip_threshold, flag, kde, DensityCurve, ThresholdMode};
use crate::trainer::{predict_proba, train, LinearModel, LossMode};
use crate::verdict::{flags_of, read_verdicts, verdicts_from, write_verdicts, NoiseVerdict};
use crate::{rng, Error, Result};

pub const STAGES: [&str; 6] = ["data", "detect", "intersect", "train", "eval", "report"];

/// Output of the GMM detector.
#[derive(Debug, Clone)]
pub struct GmmDetection {
    pub verdicts: Vec<NoiseVerdict>,
    pub model: GmmModel,
    pub threshold: f64,
    pub mode: ThresholdMode,
    /// Absent when the scores had zero spread.
    pub curve: Option<DensityCurve>,
}

pub fn detect_gmm(train: &Corpus, cfg: &PipelineConfig, seed: u64) -> Result<GmmDetection> {
    let rows = train.feature_rows();
    let model = gmm::fit(&rows, &cfg.gmm.build(seed))?;
    let scores = gmm::score_noise(&model, &rows)?;
    let kde_cfg = cfg.kde.build()?;
    let (threshold, mode) = dip_threshold(&scores, &kde_cfg)?;
    let flags = flag(&scores, threshold);
    Ok(GmmDetection {
        verdicts: verdicts_from("gmm", train.ids(), &scores, &flags),
        model,
        threshold,
        mode,
        curve: kde(&scores, &kde_cfg).ok(),
    })
}

/// One detector's verdicts plus whatever it fitted along the way.
#[derive(Debug, Clone)]
pub struct Detection {
    pub verdicts: Vec<NoiseVerdict>,
    pub gmm: Option<GmmDetection>,
    pub transition: Option<TransitionMatrix>,
}

pub fn detector_seed(seed: u64, method: Method) -> u64 {
    rng::derive_seed(seed, &format!("detect-{method}"))
}

/// Runs `method` on the training split. NTM with an estimated matrix uses the
/// GMM flags in `gmm_flags`, computing them when not supplied.
pub fn detect(method: Method, train: &Corpus, cfg: &PipelineConfig, seed: u64, gmm_flags: Option<&[bool]>) -> Result<Detection> {
    let s = detector_seed(seed, method);
    let plain = |verdicts| Detection {
        verdicts,
        gmm: None,
        transition: None,
    };
    Ok(match method {
        Method::Gmm => {
            let g = detect_gmm(train, cfg, s)?;
            Detection {
                verdicts: g.verdicts.clone(),
                gmm: Some(g),
                transition: None,
            }
        }
        Method::St => plain(small_loss_trick(train, &cfg.st_config(s))?),
        Method::Ct => plain(co_teaching(train, &cfg.ct_config(s))?),
        Method::Ls => plain(ls_detect(train, &cfg.ls_config(), &cfg.trainer.build(s, LossMode::Plain))?),
        Method::Ntm => {
            let tm = match cfg.ntm.given_matrix()? {
                Some(tm) => tm,
                None => {
                    let flags = match gmm_flags {
                        Some(f) => f.to_vec(),
                        None => flags_of(&detect_gmm(train, cfg, detector_seed(seed, Method::Gmm))?.verdicts),
                    };
                    estimate_transition(train, &flags)?
                }
            };
            let verdicts = ntm_detect(train, &tm, &cfg.trainer.build(s, LossMode::Plain))?;
            Detection {
                verdicts,
                gmm: None,
                transition: Some(tm),
            }
        }
        Method::Oracle => plain(oracle_verdicts(train)?),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: Method,
    pub n_flagged: usize,
    /// Flagged share of the training split, in percent.
    pub pct_flagged: f64,
    /// Flagged count by provenance.
    pub flagged_by_source: BTreeMap<Source, usize>,
    /// Flagged count by injected noise kind, when ground truth exists.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub flagged_by_kind: BTreeMap<String, usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold_mode: Option<ThresholdMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transition: Option<Vec<Vec<f64>>>,
    /// Retrained model on the filtered split, evaluated on the test split.
    pub eval: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntersectionReport {
    pub members: Vec<Method>,
    pub n_flagged: usize,
    pub pct_flagged: f64,
    pub eval: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MccTable {
    pub methods: Vec<Method>,
    pub values: Vec<Vec<f64>>,
    pub degenerate: Vec<Vec<bool>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub baseline: Option<EvalReport>,
    pub methods: Vec<MethodReport>,
    pub intersections: Vec<IntersectionReport>,
    pub upset: Vec<UpsetRow>,
    pub mcc: Option<MccTable>,
    pub config: serde_json::Value,
    /// Wall-clock seconds per stage. The only non-reproducible field.
    pub timings: BTreeMap<String, f64>,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports always serialize")
    }

    /// Report JSON with the timing field removed, for reproducibility checks.
    pub fn to_json_without_timings(&self) -> String {
        let mut v = serde_json::to_value(self).expect("reports always serialize");
        v.as_object_mut().expect("object").remove("timings");
        serde_json::to_string_pretty(&v).expect("values always serialize")
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct ThresholdRecord {
    threshold: f64,
    mode: ThresholdMode,
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

struct Outputs {
    root: PathBuf,
    root_existed: bool,
    created: Vec<PathBuf>,
}

impl Outputs {
    fn new(root: &Path) -> Self {
        Outputs {
            root: root.to_path_buf(),
            root_existed: root.exists(),
            created: Vec::new(),
        }
    }

    fn stage(&mut self, name: &str) -> Result<PathBuf> {
        let dir = self.root.join(name);
        if !dir.exists() {
            self.created.push(dir.clone());
        }
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(dir)
    }

    fn discard(self) {
        if self.root_existed {
            for d in &self.created {
                let _ = std::fs::remove_dir_all(d);
            }
        } else {
            let _ = std::fs::remove_dir_all(&self.root);
        }
    }
}

fn kind_counts(flags: &[bool], corpus: &Corpus) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for (e, _) in corpus.examples().iter().zip(flags).filter(|(_, &f)| f) {
        if let Some(k) = e.true_noise {
            let name = serde_json::to_value(k).expect("kinds serialize");
            *out.entry(name.as_str().unwrap_or_default().to_owned()).or_default() += 1;
        }
    }
    out
}

fn source_counts(flags: &[bool], corpus: &Corpus) -> BTreeMap<Source, usize> {
    let mut out = BTreeMap::new();
    for (e, _) in corpus.examples().iter().zip(flags).filter(|(_, &f)| f) {
        *out.entry(e.source).or_default() += 1;
    }
    out
}

fn pct(n: usize, total: usize) -> f64 {
    100.0 * n as f64 / total as f64
}

/// Trains on `train` minus `flags`, evaluates on `test`, saves the checkpoint.
fn retrain_and_eval(name: &str, train_split: &Corpus, test: &Corpus, flags: Option<&[bool]>, cfg: &PipelineConfig, seed: u64, out: &mut Outputs) -> Result<EvalReport> {
    let tc = cfg.trainer.build(rng::derive_seed(seed, "retrain"), LossMode::Plain);
    let keep: Option<Vec<bool>> = flags.map(|f| f.iter().map(|x| !x).collect());
    let (model, _) = train(train_split, &tc, keep.as_deref()).map_err(|e| e.in_stage("train"))?;
    model.save(&out.stage("train")?.join(format!("{name}.model")))?;
    eval_model(name, &model, train_split, test, flags, out)
}

fn eval_model(name: &str, model: &LinearModel, train_split: &Corpus, test: &Corpus, flags: Option<&[bool]>, out: &mut Outputs) -> Result<EvalReport> {
    let p1: Vec<f64> = predict_proba(model, test)?.iter().map(|p| p[1]).collect();
    let comp = match flags {
        Some(f) => composition(f, train_split)?,
        None => BTreeMap::new(),
    };
    let report = evaluate(&p1, &test.labels(), comp).map_err(|e| e.in_stage("eval"))?;
    let json = serde_json::to_string_pretty(&report).expect("reports serialize");
    write_file(&out.stage("eval")?.join(format!("{name}.json")), &json)?;
    Ok(report)
}

fn tag(stage: &'static str) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Stage { .. } => e,
        other => other.in_stage(stage),
    }
}

/// Loads or generates the corpus and splits it. Synthetic test splits keep
/// only clean examples unless `keep_noisy_test` is set.
pub fn prepare_data(cfg: &PipelineConfig, seed: u64) -> Result<(Corpus, Corpus)> {
    let corpus = match &cfg.corpus {
        Some(path) => load_corpus(path, None)?,
        None => {
            let mut spec = cfg.synth.clone();
            spec.seed = seed;
            generate(&spec)?
        }
    };
    let (train_split, test) = stratified_split(&corpus, cfg.test_fraction, rng::derive_seed(seed, "split"));
    let test = if cfg.keep_noisy_test {
        test
    } else {
        let keep: Vec<bool> = test
            .examples()
            .iter()
            .map(|e| e.true_noise.is_none_or(|k| k == NoiseKind::Clean))
            .collect();
        test.retain_mask(&keep)?
    };
    Ok((train_split, test))
}

pub fn run_pipeline(cfg: &PipelineConfig) -> Result<RunReport> {
    cfg.validate()?;
    let seed = cfg.seed.ok_or_else(|| Error::invalid("a run needs an explicit seed"))?;
    let mut out = Outputs::new(&cfg.outdir);
    match run_stages(cfg, seed, &mut out) {
        Ok(r) => Ok(r),
        Err(e) => {
            out.discard();
            Err(e)
        }
    }
}

fn run_stages(cfg: &PipelineConfig, seed: u64, out: &mut Outputs) -> Result<RunReport> {
    let mut timings = BTreeMap::new();
    let mut clock = Instant::now();
    let mut lap = |name: &str, timings: &mut BTreeMap<String, f64>| {
        timings.insert(name.to_owned(), clock.elapsed().as_secs_f64());
        clock = Instant::now();
    };

    let (train_split, test) = prepare_data(cfg, seed).map_err(tag("data"))?;
    let data_dir = out.stage("data")?;
    save_corpus(&train_split, &data_dir.join("train.jsonl"))?;
    save_corpus(&test, &data_dir.join("test.jsonl"))?;
    lap("data", &mut timings);

    // Detection. GMM runs first so NTM can reuse its flags.
    let detect_dir = out.stage("detect")?;
    let mut order = cfg.methods.clone();
    order.sort_by_key(|m| *m != Method::Gmm);
    let mut detections: BTreeMap<Method, Detection> = BTreeMap::new();
    for m in order {
        let gmm_flags = detections.get(&Method::Gmm).map(|d| flags_of(&d.verdicts));
        let d = detect(m, &train_split, cfg, seed, gmm_flags.as_deref()).map_err(tag("detect"))?;
        write_verdicts(&d.verdicts, &detect_dir.join(format!("{m}.tsv")))?;
        if let Some(g) = &d.gmm {
            g.model.save(&detect_dir.join("gmm_model.txt"))?;
            let th = ThresholdRecord {
                threshold: g.threshold,
                mode: g.mode,
            };
            write_file(&detect_dir.join("gmm_threshold.json"), &serde_json::to_string(&th).expect("serializes"))?;
            if let Some(c) = &g.curve {
                c.save(&detect_dir.join("kde_curve.txt"))?;
            }
        }
        if let Some(tm) = &d.transition {
            tm.save(&detect_dir.join("transition.txt"))?;
        }
        detections.insert(m, d);
    }
    lap("detect", &mut timings);

    // Intersections and co-occurrence.
    let sets: Vec<VerdictSet> = cfg
        .methods
        .iter()
        .map(|m| VerdictSet::from_verdicts(m.as_str(), &detections[m].verdicts))
        .collect();
    let mut upset = Vec::new();
    let mut mcc = None;
    if !sets.is_empty() {
        let dir = out.stage("intersect")?;
        if sets.len() <= MAX_UPSET_METHODS {
            upset = upset_table(&sets).map_err(tag("intersect"))?;
            write_file(&dir.join("upset.tsv"), &upset_to_tsv(&upset))?;
        }
        let m = mcc_matrix(&sets).map_err(tag("intersect"))?;
        let mut tsv = String::from("method");
        for s in &sets {
            write!(tsv, "\t{}", s.method).unwrap();
        }
        tsv.push('\n');
        for (s, row) in sets.iter().zip(&m) {
            tsv.push_str(&s.method);
            for v in row {
                write!(tsv, "\t{}", fmt17(v.value)).unwrap();
            }
            tsv.push('\n');
        }
        write_file(&dir.join("mcc.tsv"), &tsv)?;
        mcc = Some(MccTable {
            methods: cfg.methods.clone(),
            values: m.iter().map(|r| r.iter().map(|c| c.value).collect()).collect(),
            degenerate: m.iter().map(|r| r.iter().map(|c| c.degenerate).collect()).collect(),
        });
    }
    let ids: Vec<&str> = train_split.ids().collect();
    let mut joint_flags = Vec::new();
    for members in &cfg.intersections {
        let names: Vec<&str> = members.iter().map(|m| m.as_str()).collect();
        let joint = intersect_flags(&sets, &names).map_err(tag("intersect"))?;
        joint_flags.push(ids.iter().map(|id| joint.contains(*id)).collect::<Vec<bool>>());
    }
    lap("intersect", &mut timings);

    // Retraining and evaluation share one trainer config across all models.
    let n = train_split.len();
    let baseline = if cfg.baseline {
        Some(retrain_and_eval("baseline", &train_split, &test, None, cfg, seed, out)?)
    } else {
        None
    };
    let mut methods = Vec::new();
    for m in &cfg.methods {
        let d = &detections[m];
        let flags = flags_of(&d.verdicts);
        let eval = retrain_and_eval(m.as_str(), &train_split, &test, Some(&flags), cfg, seed, out)?;
        let n_flagged = flags.iter().filter(|&&f| f).count();
        methods.push(MethodReport {
            method: *m,
            n_flagged,
            pct_flagged: pct(n_flagged, n),
            flagged_by_source: source_counts(&flags, &train_split),
            flagged_by_kind: kind_counts(&flags, &train_split),
            threshold: d.gmm.as_ref().map(|g| g.threshold),
            threshold_mode: d.gmm.as_ref().map(|g| g.mode),
            transition: d.transition.as_ref().map(|t| t.t().to_vec()),
            eval,
        });
    }
    let mut intersections = Vec::new();
    for (members, flags) in cfg.intersections.iter().zip(&joint_flags) {
        let name: Vec<&str> = members.iter().map(|m| m.as_str()).collect();
        let eval = retrain_and_eval(&name.join("+"), &train_split, &test, Some(flags), cfg, seed, out)?;
        let n_flagged = flags.iter().filter(|&&f| f).count();
        intersections.push(IntersectionReport {
            members: members.clone(),
            n_flagged,
            pct_flagged: pct(n_flagged, n),
            eval,
        });
    }
    lap("train_eval", &mut timings);

    let report = RunReport {
        seed,
        n_train: n,
        n_test: test.len(),
        baseline,
        methods,
        intersections,
        upset,
        mcc,
        config: serde_json::to_value(cfg).expect("configs serialize"),
        timings,
    };
    write_file(&out.stage("report")?.join("report.json"), &report.to_json())?;
    Ok(report)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        line: e.line(),
        message: format!("{}: {e}", path.display()),
    })
}

/// Rebuilds a report from the artifacts of a finished run under `cfg.outdir`.
/// Timings are not recorded in artifacts and come back empty.
pub fn assemble_report(cfg: &PipelineConfig) -> Result<RunReport> {
    cfg.validate()?;
    let seed = cfg.seed.ok_or_else(|| Error::invalid("a report needs an explicit seed"))?;
    let root = &cfg.outdir;
    let train_split = load_corpus(&root.join("data/train.jsonl"), None)?;
    let test = load_corpus(&root.join("data/test.jsonl"), Some(train_split.dim()))?;
    let ids: Vec<&str> = train_split.ids().collect();
    let n = train_split.len();
    let detect_dir = root.join("detect");
    let eval_dir = root.join("eval");

    let mut sets = Vec::new();
    let mut methods = Vec::new();
    for m in &cfg.methods {
        let verdicts = read_verdicts(&detect_dir.join(format!("{m}.tsv")))?;
        if verdicts.len() != n || verdicts.iter().zip(&ids).any(|(v, id)| v.id != *id) {
            return Err(Error::invalid(format!("{m} verdicts do not match the training split")));
        }
        let flags = flags_of(&verdicts);
        let n_flagged = flags.iter().filter(|&&f| f).count();
        let th: Option<ThresholdRecord> = match m {
            Method::Gmm => Some(read_json(&detect_dir.join("gmm_threshold.json"))?),
            _ => None,
        };
        let transition = match m {
            Method::Ntm => Some(TransitionMatrix::load(&detect_dir.join("transition.txt"))?.t().to_vec()),
            _ => None,
        };
        methods.push(MethodReport {
            method: *m,
            n_flagged,
            pct_flagged: pct(n_flagged, n),
            flagged_by_source: source_counts(&flags, &train_split),
            flagged_by_kind: kind_counts(&flags, &train_split),
            threshold: th.map(|t| t.threshold),
            threshold_mode: th.map(|t| t.mode),
            transition,
            eval: read_json(&eval_dir.join(format!("{m}.json")))?,
        });
        sets.push(VerdictSet::from_verdicts(m.as_str(), &verdicts));
    }
    let mut upset = Vec::new();
    let mut mcc = None;
    if !sets.is_empty() {
        if sets.len() <= MAX_UPSET_METHODS {
            upset = upset_table(&sets)?;
        }
        let m = mcc_matrix(&sets)?;
        mcc = Some(MccTable {
            methods: cfg.methods.clone(),
            values: m.iter().map(|r| r.iter().map(|c| c.value).collect()).collect(),
            degenerate: m.iter().map(|r| r.iter().map(|c| c.degenerate).collect()).collect(),
        });
    }
    let mut intersections = Vec::new();
    for members in &cfg.intersections {
        let names: Vec<&str> = members.iter().map(|m| m.as_str()).collect();
        let joint = intersect_flags(&sets, &names)?;
        intersections.push(IntersectionReport {
            members: members.clone(),
            n_flagged: joint.len(),
            pct_flagged: pct(joint.len(), n),
            eval: read_json(&eval_dir.join(format!("{}.json", names.join("+"))))?,
        });
    }
    let baseline = if cfg.baseline {
        Some(read_json(&eval_dir.join("baseline.json"))?)
    } else {
        None
    };
    Ok(RunReport {
        seed,
        n_train: n,
        n_test: test.len(),
        baseline,
        methods,
        intersections,
        upset,
        mcc,
        config: serde_json::to_value(cfg).expect("configs serialize"),
        timings: BTreeMap::new(),
    })
}
