//! Data preparation for training runs and the matched adaptive/baseline
//! comparison over seeds and pairing modes.

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{DataConfig, ExperimentConfig};
use crate::data::{build_vocab, load_labelled, Domain, TokenSequence, Vocab};
use crate::error::{Error, Result};
use crate::metrics::Metrics;
use crate::model::{mix, ModelConfig};
use crate::synth::{generate_sentences, pair_target, DomainSpec, PairMode, Sentence};
use crate::trainer::{evaluate, fit, FitOutput, TrainConfig};

/// Corpora with ids assigned, the vocabulary, and a model config sized to
/// it.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub train: Vec<TokenSequence>,
    pub dev: Vec<TokenSequence>,
    pub test: Option<Vec<TokenSequence>>,
    pub target: Option<Vec<TokenSequence>>,
    pub vocab: Vocab,
    pub model: ModelConfig,
}

/// Builds the vocabulary (source train, plus the target corpus when
/// `data.vocab_includes_target`), assigns ids, and fixes the model's
/// vocabulary size and tag count.
pub fn prepare(
    model: &ModelConfig,
    data: &DataConfig,
    mut train: Vec<TokenSequence>,
    mut dev: Vec<TokenSequence>,
    mut test: Option<Vec<TokenSequence>>,
    mut target: Option<Vec<TokenSequence>>,
) -> Result<Prepared> {
    if train.is_empty() {
        return Err(Error::Data("source training set is empty".into()));
    }
    if dev.is_empty() {
        return Err(Error::Data("source dev set is empty".into()));
    }
    let extra = match (&target, data.vocab_includes_target) {
        (Some(t), true) => t.as_slice(),
        _ => &[],
    };
    let vocab = build_vocab(train.iter().chain(extra), data.min_freq)?;
    for s in train
        .iter_mut()
        .chain(dev.iter_mut())
        .chain(test.iter_mut().flatten())
        .chain(target.iter_mut().flatten())
    {
        vocab.assign_ids(s)?;
    }
    for t in target.iter_mut().flatten() {
        t.tags = None;
        t.tag_ids = None;
        t.domain = Domain::Target;
    }
    let mut model = model.clone();
    model.vocab_size = vocab.len();
    model.n_tags = vocab.n_tags();
    model.max_len = model.max_len.max(data.max_len);
    model.validate()?;
    Ok(Prepared {
        train,
        dev,
        test,
        target,
        vocab,
        model,
    })
}

/// Loads the corpora named in `cfg.data`.
pub fn load_files(cfg: &ExperimentConfig) -> Result<Prepared> {
    let data = &cfg.data;
    let opts = data.conll_options();
    let need = |p: &Option<std::path::PathBuf>, field: &str| {
        p.clone()
            .ok_or_else(|| Error::Config(format!("data.{field} is required")))
    };
    let train_path = need(&data.source_train, "source_train")?;
    let dev_path = need(&data.source_dev, "source_dev")?;
    if cfg.train.adaptation && data.target.is_none() {
        return Err(Error::Config(
            "data.target is required when train.adaptation is true (set train.adaptation=false for a baseline)".into(),
        ));
    }
    let train = load_labelled(&train_path, &opts, data.scheme)?;
    let dev = load_labelled(&dev_path, &opts, data.scheme)?;
    let test = data
        .source_test
        .as_ref()
        .map(|p| load_labelled(p, &opts, data.scheme))
        .transpose()?;
    // Ids are assigned in `prepare`, once the vocabulary exists.
    let target = data
        .target
        .as_ref()
        .map(|p| crate::data::read_unlabeled_file(p, data.target_format, data.max_len))
        .transpose()?;
    prepare(&cfg.model, data, train, dev, test, target)
}

fn to_sequences(sentences: Vec<Sentence>, domain: Domain) -> Vec<TokenSequence> {
    sentences
        .into_iter()
        .map(|(tokens, tags)| TokenSequence::new(tokens, Some(tags), domain))
        .collect()
}

/// Generator specs for one seed and pairing mode.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpecs {
    pub train: DomainSpec,
    pub dev: DomainSpec,
    /// Labelled, drawn from the target distribution.
    pub test: DomainSpec,
    pub target: DomainSpec,
}

pub fn synth_specs(cfg: &ExperimentConfig, seed: u64, mode: PairMode) -> SynthSpecs {
    let s = &cfg.synth;
    let train = DomainSpec {
        seed: mix(seed, 1),
        ..s.source.clone()
    };
    let target = DomainSpec {
        seed: mix(seed, 3),
        ..pair_target(&s.source, &s.target, mode)
    };
    let dev = DomainSpec {
        seed: mix(seed, 2),
        n_sentences: s.dev_sentences,
        ..train.clone()
    };
    let test = DomainSpec {
        seed: mix(seed, 4),
        n_sentences: s.test_sentences,
        ..target.clone()
    };
    SynthSpecs { train, dev, test, target }
}

/// Synthetic train/dev/test/target corpora for one seed and pairing mode.
pub fn synth_corpora(cfg: &ExperimentConfig, seed: u64, mode: PairMode) -> Result<Prepared> {
    let specs = synth_specs(cfg, seed, mode);
    prepare(
        &cfg.model,
        &cfg.data,
        to_sequences(generate_sentences(&specs.train)?, Domain::Source),
        to_sequences(generate_sentences(&specs.dev)?, Domain::Source),
        Some(to_sequences(generate_sentences(&specs.test)?, Domain::Source)),
        Some(to_sequences(generate_sentences(&specs.target)?, Domain::Target)),
    )
}

/// Trains one arm and scores it on the test set.
pub fn run_arm(prepared: &Prepared, train: &TrainConfig) -> Result<(FitOutput, Option<Metrics>)> {
    let out = fit(
        &prepared.model,
        train,
        &prepared.train,
        &prepared.dev,
        prepared.target.as_deref(),
        &prepared.vocab,
    )?;
    let test = prepared
        .test
        .as_ref()
        .map(|t| evaluate(&out.best.params, &prepared.model, t, &prepared.vocab))
        .transpose()?;
    Ok((out, test))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub test_f1: f64,
    pub best_dev_f1: f64,
    pub epochs: usize,
    pub domain_accuracy: Vec<f64>,
    pub probe_domain_accuracy: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRow {
    pub seed: u64,
    pub adapted: ArmResult,
    pub baseline: ArmResult,
    pub delta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

impl MeanSd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = if values.len() > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        MeanSd { mean, sd: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSection {
    pub mode: PairMode,
    pub rows: Vec<SeedRow>,
    pub adapted_f1: MeanSd,
    pub baseline_f1: MeanSd,
    pub mean_delta: f64,
    /// Seeds whose adapted run ended with lower discriminator accuracy than
    /// after its first epoch.
    pub domain_accuracy_dropped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub runs: usize,
    pub sections: Vec<ModeSection>,
}

fn arm_result(out: &FitOutput, test: Option<Metrics>) -> Result<ArmResult> {
    let test = test.ok_or_else(|| Error::Contract("experiment arm has no test set".into()))?;
    Ok(ArmResult {
        test_f1: test.f1,
        best_dev_f1: out.best.best_dev_f1.unwrap_or(0.0),
        epochs: out.history.len(),
        domain_accuracy: out.history.iter().filter_map(|h| h.domain_accuracy).collect(),
        probe_domain_accuracy: out.history.iter().filter_map(|h| h.probe_domain_accuracy).collect(),
    })
}

/// Adapted and baseline runs for every seed and mode of `cfg.experiment`.
/// Runs are independent and execute on the rayon pool.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    if cfg.experiment.seeds.is_empty() || cfg.experiment.modes.is_empty() {
        return Err(Error::Config("experiment.seeds and experiment.modes must be nonempty".into()));
    }
    let mut jobs = Vec::new();
    for &mode in &cfg.experiment.modes {
        for &seed in &cfg.experiment.seeds {
            for adaptation in [true, false] {
                jobs.push((mode, seed, adaptation));
            }
        }
    }
    let results = jobs
        .par_iter()
        .map(|&(mode, seed, adaptation)| -> Result<ArmResult> {
            let prepared = synth_corpora(cfg, seed, mode)?;
            let train = TrainConfig {
                seed,
                adaptation,
                ..cfg.train.clone()
            };
            let (out, test) = run_arm(&prepared, &train)?;
            let r = arm_result(&out, test)?;
            info!(
                "{} seed {seed} {}: test f1 {:.4}",
                mode.name(),
                if adaptation { "adapted" } else { "baseline" },
                r.test_f1
            );
            Ok(r)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut results = results.into_iter();
    let mut sections = Vec::new();
    for &mode in &cfg.experiment.modes {
        let mut rows = Vec::new();
        for &seed in &cfg.experiment.seeds {
            let adapted = results.next().expect("one result per job");
            let baseline = results.next().expect("one result per job");
            rows.push(SeedRow {
                seed,
                delta: adapted.test_f1 - baseline.test_f1,
                adapted,
                baseline,
            });
        }
        let a: Vec<f64> = rows.iter().map(|r| r.adapted.test_f1).collect();
        let b: Vec<f64> = rows.iter().map(|r| r.baseline.test_f1).collect();
        let dropped = rows
            .iter()
            .filter(|r| match (r.adapted.domain_accuracy.first(), r.adapted.domain_accuracy.last()) {
                (Some(first), Some(last)) => last < first,
                _ => false,
            })
            .count();
        let adapted_f1 = MeanSd::of(&a);
        let baseline_f1 = MeanSd::of(&b);
        sections.push(ModeSection {
            mode,
            rows,
            mean_delta: adapted_f1.mean - baseline_f1.mean,
            adapted_f1,
            baseline_f1,
            domain_accuracy_dropped: dropped,
        });
    }
    Ok(ExperimentReport {
        runs: jobs.len(),
        sections,
    })
}

impl ExperimentReport {
    /// Plain-text tables, one section per pairing mode.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for s in &self.sections {
            out.push_str(&format!("== mode: {} ==\n", s.mode.name()));
            out.push_str("seed   adapted  baseline  delta    domain acc (adapted, first -> last)\n");
            for r in &s.rows {
                let acc = &r.adapted.domain_accuracy;
                let traj = match (acc.first(), acc.last()) {
                    (Some(a), Some(b)) => format!("{a:.3} -> {b:.3}"),
                    _ => "-".into(),
                };
                out.push_str(&format!(
                    "{:<6} {:.4}   {:.4}    {:+.4}  {traj}\n",
                    r.seed, r.adapted.test_f1, r.baseline.test_f1, r.delta
                ));
            }
            out.push_str(&format!(
                "mean   {:.4}±{:.4}  {:.4}±{:.4}  delta {:+.4}  domain acc dropped in {}/{} seeds\n\n",
                s.adapted_f1.mean,
                s.adapted_f1.sd,
                s.baseline_f1.mean,
                s.baseline_f1.sd,
                s.mean_delta,
                s.domain_accuracy_dropped,
                s.rows.len()
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_sd() {
        let m = MeanSd::of(&[1.0, 2.0, 3.0]);
        assert_eq!(m.mean, 2.0);
        assert_eq!(m.sd, 1.0);
        assert_eq!(MeanSd::of(&[4.0]).sd, 0.0);
    }

    #[test]
    fn synth_corpora_are_consistent() {
        let mut cfg = ExperimentConfig::default();
        cfg.synth.source.n_sentences = 50;
        cfg.synth.target.n_sentences = 40;
        cfg.synth.dev_sentences = 10;
        cfg.synth.test_sentences = 20;
        let p = synth_corpora(&cfg, 1, PairMode::Different).unwrap();
        assert_eq!((p.train.len(), p.dev.len()), (50, 10));
        assert_eq!(p.test.as_ref().unwrap().len(), 20);
        let target = p.target.as_ref().unwrap();
        assert!(target.iter().all(|t| t.tags.is_none() && t.domain == Domain::Target));
        assert_eq!(p.model.vocab_size, p.vocab.len());
        // Target tokens are in the vocabulary, not UNK.
        assert!(target.iter().flat_map(|t| &t.token_ids).all(|&i| i != crate::data::UNK));
        let again = synth_corpora(&cfg, 1, PairMode::Different).unwrap();
        assert_eq!(again.train, p.train);
    }

    #[test]
    fn missing_target_names_the_field() {
        let mut cfg = ExperimentConfig::default();
        cfg.data.source_train = Some("a".into());
        cfg.data.source_dev = Some("b".into());
        match load_files(&cfg) {
            Err(Error::Config(m)) => assert!(m.contains("data.target"), "{m}"),
            other => panic!("{other:?}"),
        }
    }
}
