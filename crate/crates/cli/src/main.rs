//! Command-line front end for the noisekit pipeline.
//!
//! Exit codes: 0 on success, 1 on usage or validation errors, 2 on runtime
//! failures.

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use noisekit::config::{Method, PipelineConfig};
use noisekit::correction::{ntm_detect, TransitionMatrix};
use noisekit::datamodel::{load_corpus, save_corpus};
use noisekit::intersect::{intersect_flags, mcc_matrix, upset_table, upset_to_tsv, VerdictSet};
use noisekit::metrics::evaluate;
use noisekit::pipeline::{assemble_report, detect, detector_seed, run_pipeline};
use noisekit::synth::generate_tallied;
use noisekit::trainer::{predict_proba, train, LinearModel, LossMode};
use noisekit::verdict::{read_verdicts, write_verdicts};
use noisekit::{rng, Error, Result};

#[derive(Parser)]
#[command(name = "noisekit", version, about = "Label-noise detection and filtering for binary corpora")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by commands that read a pipeline config. Trailing
/// `section.key=value` arguments (a leading `--` is optional) override it.
#[derive(clap::Args)]
struct ConfigArgs {
    /// TOML config file; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// `section.key=value` overrides.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<PipelineConfig> {
        let text = match &self.config {
            Some(p) => Some(std::fs::read_to_string(p).map_err(|e| io_error(p, e))?),
            None => None,
        };
        let mut overrides = self.overrides.clone();
        if let Some(s) = self.seed {
            overrides.push(format!("seed={s}"));
        }
        PipelineConfig::resolve(text.as_deref(), &overrides)
    }

    fn seed_given(&self) -> bool {
        self.seed.is_some()
            || self
                .overrides
                .iter()
                .any(|o| o.trim_start_matches('-').starts_with("seed="))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus from the `[synth]` section.
    Gen {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Run one detector on a corpus and write its verdicts.
    Detect {
        #[arg(value_parser = parse_method)]
        method: Method,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// GMM verdicts used to estimate the NTM transition matrix.
        #[arg(long)]
        gmm_verdicts: Option<PathBuf>,
        /// Transition matrix file used as given by NTM.
        #[arg(long)]
        transition: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Tabulate overlaps between verdict files.
    Intersect {
        /// One verdict file per method.
        #[arg(long = "verdicts", required = true)]
        verdicts: Vec<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        /// Comma-separated method subset; writes the ids flagged by all of them.
        #[arg(long)]
        members: Vec<String>,
    },
    /// Drop flagged examples from a corpus.
    Filter {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        verdicts: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a classifier with the `[trainer]` settings.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Evaluate a trained model on a labelled corpus.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the full pipeline. `--seed` is required.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Rebuild the run report from the artifacts under `outdir`.
    Report {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn parse_method(s: &str) -> std::result::Result<Method, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn io_error(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| io_error(path, e))
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Gen { out, cfg } => {
            let c = cfg.resolve()?;
            let mut spec = c.synth.clone();
            if let Some(s) = c.seed {
                spec.seed = s;
            }
            let (corpus, tally) = generate_tallied(&spec)?;
            save_corpus(&corpus, &out)?;
            println!(
                "{} examples: {} clean, {} label_flip, {} structural, {} content",
                corpus.len(),
                tally.clean,
                tally.label_flip,
                tally.structural,
                tally.content
            );
        }
        Command::Detect {
            method,
            corpus,
            out,
            gmm_verdicts,
            transition,
            cfg,
        } => {
            let c = cfg.resolve()?;
            let seed = c.seed.unwrap_or(0);
            let corpus = load_corpus(&corpus, None)?;
            let verdicts = match (method, transition) {
                (Method::Ntm, Some(path)) => {
                    let tm = TransitionMatrix::load(&path)?;
                    let tc = c.trainer.build(detector_seed(seed, Method::Ntm), LossMode::Plain);
                    ntm_detect(&corpus, &tm, &tc)?
                }
                _ => {
                    let gmm_flags = match gmm_verdicts {
                        Some(path) => Some(aligned_flags(&read_verdicts(&path)?, &corpus)?),
                        None => None,
                    };
                    detect(method, &corpus, &c, seed, gmm_flags.as_deref())?.verdicts
                }
            };
            write_verdicts(&verdicts, &out)?;
            let n = verdicts.iter().filter(|v| v.flag).count();
            println!("{method}: {n} of {} flagged", verdicts.len());
        }
        Command::Intersect {
            verdicts,
            out_dir,
            members,
        } => {
            let mut sets = Vec::new();
            for path in &verdicts {
                let v = read_verdicts(path)?;
                let method = v
                    .first()
                    .map(|x| x.method.clone())
                    .ok_or_else(|| Error::Invalid(format!("{} holds no verdicts", path.display())))?;
                sets.push(VerdictSet::from_verdicts(method, &v));
            }
            std::fs::create_dir_all(&out_dir).map_err(|e| io_error(&out_dir, e))?;
            write(&out_dir.join("upset.tsv"), &upset_to_tsv(&upset_table(&sets)?))?;
            let m = mcc_matrix(&sets)?;
            let mut tsv = String::from("method");
            for s in &sets {
                tsv.push('\t');
                tsv.push_str(&s.method);
            }
            tsv.push('\n');
            for (s, row) in sets.iter().zip(&m) {
                tsv.push_str(&s.method);
                for v in row {
                    tsv.push_str(&format!("\t{}", v.value));
                }
                tsv.push('\n');
            }
            write(&out_dir.join("mcc.tsv"), &tsv)?;
            for spec in &members {
                let names: Vec<&str> = spec.split(',').map(str::trim).collect();
                let joint = intersect_flags(&sets, &names)?;
                let text: String = joint.iter().map(|id| format!("{id}\n")).collect();
                write(&out_dir.join(format!("{}.ids", names.join("+"))), &text)?;
                println!("{}: {} jointly flagged", names.join("+"), joint.len());
            }
        }
        Command::Filter { corpus, verdicts, out } => {
            let corpus = load_corpus(&corpus, None)?;
            let v = read_verdicts(&verdicts)?;
            let known: HashSet<&str> = corpus.ids().collect();
            if let Some(bad) = v.iter().find(|x| !known.contains(x.id.as_str())) {
                return Err(Error::Invalid(format!("verdict for unknown id `{}`", bad.id)));
            }
            let flagged: HashSet<&str> = v.iter().filter(|x| x.flag).map(|x| x.id.as_str()).collect();
            let keep: Vec<bool> = corpus.ids().map(|id| !flagged.contains(id)).collect();
            let cleaned = corpus.retain_mask(&keep)?;
            save_corpus(&cleaned, &out)?;
            println!("kept {} of {}", cleaned.len(), corpus.len());
        }
        Command::Train { corpus, out, cfg } => {
            let c = cfg.resolve()?;
            let corpus = load_corpus(&corpus, None)?;
            let tc = c
                .trainer
                .build(rng::derive_seed(c.seed.unwrap_or(0), "retrain"), LossMode::Plain);
            let (model, _) = train(&corpus, &tc, None)?;
            model.save(&out)?;
        }
        Command::Eval { model, corpus, out } => {
            let model = LinearModel::load(&model)?;
            let corpus = load_corpus(&corpus, Some(model.dim()))?;
            let p1: Vec<f64> = predict_proba(&model, &corpus)?.iter().map(|p| p[1]).collect();
            let report = evaluate(&p1, &corpus.labels(), Default::default())?;
            let json = serde_json::to_string_pretty(&report).expect("reports serialize");
            match out {
                Some(p) => write(&p, &json)?,
                None => println!("{json}"),
            }
        }
        Command::Run { cfg } => {
            if !cfg.seed_given() {
                return Err(Error::Invalid("run requires --seed".into()));
            }
            let c = cfg.resolve()?;
            let report = run_pipeline(&c)?;
            println!("report written to {}", c.outdir.join("report/report.json").display());
            if let Some(b) = &report.baseline {
                println!("baseline auc {:.4}", b.auc);
            }
            for m in &report.methods {
                println!("{:<7} flagged {:>5} ({:.2}%)  auc {:.4}", m.method.to_string(), m.n_flagged, m.pct_flagged, m.eval.auc);
            }
        }
        Command::Report { cfg } => {
            let c = cfg.resolve()?;
            let report = assemble_report(&c)?;
            let dir = c.outdir.join("report");
            std::fs::create_dir_all(&dir).map_err(|e| io_error(&dir, e))?;
            write(&dir.join("report.json"), &report.to_json())?;
            println!("report written to {}", dir.join("report.json").display());
        }
    }
    Ok(())
}

/// Flags in corpus order; every corpus id must have a verdict.
fn aligned_flags(verdicts: &[noisekit::verdict::NoiseVerdict], corpus: &noisekit::datamodel::Corpus) -> Result<Vec<bool>> {
    let by_id: std::collections::HashMap<&str, bool> = verdicts.iter().map(|v| (v.id.as_str(), v.flag)).collect();
    corpus
        .ids()
        .map(|id| {
            by_id
                .get(id)
                .copied()
                .ok_or_else(|| Error::Invalid(format!("no verdict for `{id}`")))
        })
        .collect()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
