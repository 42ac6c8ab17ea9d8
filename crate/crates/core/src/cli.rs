//! Command-line entry points. Every command is a plain function so tests can
//! drive it without a subprocess; `run` maps parsed arguments onto them and
//! errors onto exit codes.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::{Deserialize, Serialize};

use crate::checks::{run_suite, SuiteReport};
use crate::config::{DataConfig, ExperimentConfig};
use crate::data::{load_labelled, read_unlabeled_file, to_iob, write_conll, Domain, TagScheme, TextFormat, TokenSequence};
use crate::error::{Error, Result};
use crate::experiment::{load_files, run_arm, run_experiment, synth_corpora, synth_specs, ExperimentReport};
use crate::metrics::Metrics;
use crate::synth::{generate_sentences, to_conll, PairMode};
use crate::trainer::{evaluate, load_checkpoint, predict, save_checkpoint};

#[derive(Debug, Parser)]
#[command(name = "advner", version, about = "Adversarial domain adaptation for NER")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// JSON config file; omitted sections take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dotted-path override, e.g. `--set train.alpha=0`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model and write a checkpoint, history and report to `output_dir`.
    Train(ConfigArgs),
    /// Score a checkpoint on a labelled CoNLL file.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        test: PathBuf,
        /// Report path; defaults to `eval.json` beside the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tag a plain-text file, one whitespace-tokenised sentence per line.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Output path; stdout when omitted.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Write a synthetic source/target corpus pair and a config that trains on it.
    Synth {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to `train.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Defaults to `synth.mode`.
        #[arg(long, value_enum)]
        mode: Option<PairMode>,
    },
    /// Matched adapted and baseline runs over `experiment.seeds` and `experiment.modes`.
    Experiment(ConfigArgs),
    /// Check every autodiff op and the full training loss against finite differences.
    Gradcheck {
        /// Add a check with a deliberately wrong expectation; the command must then fail.
        #[arg(long)]
        inject_fault: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// False when `train.adaptation` is off or `train.alpha` is 0: the
    /// domain term then has no effect on the NER model.
    pub adaptive: bool,
    pub non_adaptive_baseline: bool,
    pub alpha: f64,
    pub grl_lambda: f64,
    pub seed: u64,
    pub epochs_run: usize,
    pub steps: usize,
    pub best_epoch: usize,
    pub best_dev_f1: Option<f64>,
    pub test: Option<Metrics>,
    pub domain_accuracy_first: Option<f64>,
    pub domain_accuracy_last: Option<f64>,
    pub max_composition_residual: f64,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

fn jsonl<T: Serialize>(records: &[T]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

fn uses_files(data: &DataConfig) -> bool {
    data.source_train.is_some() || data.source_dev.is_some() || data.source_test.is_some() || data.target.is_some()
}

/// Trains on the files in `cfg.data`, or on a synthetic pair when no data
/// path is set. Writes `checkpoint/`, `history.jsonl`, `steps.jsonl` and
/// `report.json` under `cfg.output_dir`.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<TrainReport> {
    cfg.model.validate()?;
    let prepared = if uses_files(&cfg.data) {
        load_files(cfg)?
    } else {
        info!("no data paths set; training on a synthetic {} pair", cfg.synth.mode.name());
        synth_corpora(cfg, cfg.train.seed, cfg.synth.mode)?
    };
    let (out, test) = run_arm(&prepared, &cfg.train)?;

    let dir = &cfg.output_dir;
    // The output location is not part of what produced the checkpoint, so
    // it is left out of the echo to keep checkpoints comparable byte for byte.
    let mut echo = cfg.echo();
    if let Some(obj) = echo.as_object_mut() {
        obj.remove("output_dir");
    }
    save_checkpoint(dir.join("checkpoint"), &out.best, &prepared.model, &cfg.train, &prepared.vocab, &echo)?;
    write_text(&dir.join("history.jsonl"), &jsonl(&out.history)?)?;
    write_text(&dir.join("steps.jsonl"), &jsonl(&out.steps)?)?;

    let adaptive = cfg.train.adaptation && cfg.train.alpha > 0.0;
    let report = TrainReport {
        adaptive,
        non_adaptive_baseline: !adaptive,
        alpha: cfg.train.alpha,
        grl_lambda: prepared.model.grl_lambda,
        seed: cfg.train.seed,
        epochs_run: out.history.len(),
        steps: out.steps.len(),
        best_epoch: out.best.epoch,
        best_dev_f1: out.best.best_dev_f1,
        test,
        domain_accuracy_first: out.history.first().and_then(|h| h.domain_accuracy),
        domain_accuracy_last: out.history.last().and_then(|h| h.domain_accuracy),
        max_composition_residual: out.steps.iter().map(|s| s.composition_residual()).fold(0.0, f64::max),
    };
    write_json(&dir.join("report.json"), &report)?;
    Ok(report)
}

fn checkpoint_data_config(config: &serde_json::Value) -> DataConfig {
    config
        .get("data")
        .and_then(|d| serde_json::from_value(d.clone()).ok())
        .unwrap_or_default()
}

/// Scores a checkpoint on a labelled file and writes the metrics to `out`.
pub fn cmd_eval(checkpoint: &Path, test: &Path, out: &Path) -> Result<Metrics> {
    let ck = load_checkpoint(checkpoint)?;
    let data = checkpoint_data_config(&ck.manifest.config);
    let mut seqs = load_labelled(test, &data.conll_options(), data.scheme)?;
    for s in &mut seqs {
        ck.vocab.assign_ids(s)?;
    }
    let metrics = evaluate(&ck.state.params, &ck.manifest.model, &seqs, &ck.vocab)?;
    write_json(out, &metrics)?;
    Ok(metrics)
}

/// Tags every line of `input`. Sentences longer than the model's maximum
/// length are tagged in consecutive windows; the joined tags are repaired to
/// valid IOB2.
pub fn cmd_predict(checkpoint: &Path, input: &Path) -> Result<String> {
    let ck = load_checkpoint(checkpoint)?;
    let model = &ck.manifest.model;
    let sentences = read_unlabeled_file(input, TextFormat::Plain, usize::MAX)?;
    let mut windows = Vec::new();
    let mut owner = Vec::new();
    for (i, s) in sentences.iter().enumerate() {
        for chunk in s.tokens.chunks(model.max_len) {
            let mut w = TokenSequence::new(chunk.to_vec(), None, Domain::Source);
            ck.vocab.assign_ids(&mut w)?;
            windows.push(w);
            owner.push(i);
        }
    }
    let predicted = predict(&ck.state.params, model, &windows, &ck.vocab)?;
    let mut tags: Vec<Vec<String>> = vec![Vec::new(); sentences.len()];
    for (i, p) in owner.into_iter().zip(predicted) {
        tags[i].extend(p);
    }
    let tags = tags
        .iter()
        .map(|t| to_iob(t, TagScheme::Iob2))
        .collect::<Result<Vec<_>>>()?;
    Ok(write_conll(
        sentences.iter().zip(&tags).map(|(s, t)| (s.tokens.as_slice(), t.as_slice())),
    ))
}

/// Writes `train.conll`, `dev.conll`, `test.conll`, `target.txt` and a
/// `config.json` pointing at them.
pub fn cmd_synth(cfg: &ExperimentConfig, seed: u64, mode: PairMode, out: &Path) -> Result<()> {
    let specs = synth_specs(cfg, seed, mode);
    for (name, spec) in [("train", &specs.train), ("dev", &specs.dev), ("test", &specs.test)] {
        write_text(&out.join(format!("{name}.conll")), &to_conll(&generate_sentences(spec)?))?;
    }
    let target: String = generate_sentences(&specs.target)?
        .iter()
        .map(|(tokens, _)| tokens.join(" ") + "\n")
        .collect();
    write_text(&out.join("target.txt"), &target)?;

    let mut train_cfg = cfg.clone();
    train_cfg.data = DataConfig {
        source_train: Some(out.join("train.conll")),
        source_dev: Some(out.join("dev.conll")),
        source_test: Some(out.join("test.conll")),
        target: Some(out.join("target.txt")),
        target_format: TextFormat::Plain,
        ..cfg.data.clone()
    };
    train_cfg.train.seed = seed;
    write_json(&out.join("config.json"), &train_cfg.echo())
}

/// Runs the comparison and writes `experiment.json` and `experiment.txt`.
pub fn cmd_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let report = run_experiment(cfg)?;
    write_json(&cfg.output_dir.join("experiment.json"), &report)?;
    write_text(&cfg.output_dir.join("experiment.txt"), &report.render())?;
    Ok(report)
}

pub fn cmd_gradcheck(inject_fault: bool) -> Result<SuiteReport> {
    run_suite(inject_fault)
}

fn render_checks(report: &SuiteReport) -> String {
    let mut out = String::new();
    for c in &report.checks {
        out.push_str(&format!(
            "{:<4} {:<40} max rel err {:.3e} over {} coords\n",
            if c.passed { "ok" } else { "FAIL" },
            c.name,
            c.max_rel_error,
            c.coordinates
        ));
    }
    out.push_str(&format!(
        "max rel err {:.3e} (tolerance {:.0e}): {}\n",
        report.max_rel_error,
        report.tolerance,
        if report.passed { "pass" } else { "FAIL" }
    ));
    out
}

/// Writes to stdout; a reader that closes the pipe early is not an error.
fn emit(text: &str) -> Result<()> {
    use std::io::Write;
    match std::io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Error::io("<stdout>", e)),
        _ => Ok(()),
    }
}

fn emit_json<T: Serialize>(value: &T) -> Result<()> {
    emit(&(serde_json::to_string_pretty(value)? + "\n"))
}

/// Caps the rayon pool at `ADVNER_THREADS` when it is set.
pub fn init_threads() -> Result<()> {
    let Ok(raw) = std::env::var("ADVNER_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("ADVNER_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("cannot size the thread pool: {e}")))
}

/// Executes a parsed command and returns the process exit code.
pub fn run(cli: Cli) -> Result<i32> {
    init_threads()?;
    match cli.command {
        Command::Train(args) => {
            let cfg = ExperimentConfig::load(args.config.as_deref(), &args.overrides)?;
            let report = cmd_train(&cfg)?;
            emit_json(&report)?;
        }
        Command::Eval { checkpoint, test, out } => {
            let out = out.unwrap_or_else(|| {
                checkpoint
                    .parent()
                    .map(|p| p.join("eval.json"))
                    .unwrap_or_else(|| PathBuf::from("eval.json"))
            });
            let metrics = cmd_eval(&checkpoint, &test, &out)?;
            emit_json(&metrics)?;
        }
        Command::Predict {
            checkpoint,
            input,
            output,
        } => {
            let text = cmd_predict(&checkpoint, &input)?;
            match output {
                Some(path) => write_text(&path, &text)?,
                None => emit(&text)?,
            }
        }
        Command::Synth {
            config,
            out,
            seed,
            mode,
        } => {
            let cfg = ExperimentConfig::load(config.config.as_deref(), &config.overrides)?;
            cmd_synth(&cfg, seed.unwrap_or(cfg.train.seed), mode.unwrap_or(cfg.synth.mode), &out)?;
        }
        Command::Experiment(args) => {
            let cfg = ExperimentConfig::load(args.config.as_deref(), &args.overrides)?;
            emit(&cmd_experiment(&cfg)?.render())?;
        }
        Command::Gradcheck { inject_fault, out } => {
            let report = cmd_gradcheck(inject_fault)?;
            emit(&render_checks(&report))?;
            if let Some(path) = out {
                write_json(&path, &report)?;
            }
            return Ok(if report.passed { 0 } else { 1 });
        }
    }
    Ok(0)
}
