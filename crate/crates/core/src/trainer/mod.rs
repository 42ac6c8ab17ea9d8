//! Joint adversarial training: each step encodes a labelled source batch and
//! an unlabelled target batch, takes one backward pass through
//! `l_ner + alpha·l_adv` and one optimizer step over all parameter groups.

mod checkpoint;
mod optim;

use log::{debug, info};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Manifest, ParamEntry, FORMAT_VERSION};
pub use optim::{clip_global_norm, OptimizerKind, OptimizerParams, OptimizerState};

use crate::autodiff::Tensor;
use crate::data::{make_batches, Batch, Domain, TokenSequence, Vocab};
use crate::error::{Error, Result};
use crate::losses::{domain_loss, ner_loss, total_loss, LossBreakdown};
use crate::metrics::{domain_accuracy, prf1, Metrics};
use crate::model::{init_params, mix, Graph, ModelConfig, ModelParams, ParamGroup};

const EVAL_BATCH: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub alpha: f64,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adaptation: bool,
    /// Epochs without a dev F1 improvement before stopping; 0 disables.
    pub early_stop_patience: usize,
    pub grad_clip: Option<f64>,
    /// Sentences per domain used to measure discriminator accuracy after
    /// each epoch.
    pub probe_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: crate::losses::DEFAULT_ALPHA,
            lr: 1e-3,
            optimizer: OptimizerKind::Adam,
            epochs: 20,
            batch_size: 32,
            seed: 0,
            adaptation: true,
            early_stop_patience: 5,
            grad_clip: Some(1.0),
            probe_size: 256,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("train.alpha must be non-negative, got {}", self.alpha)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("train.lr must be positive, got {}", self.lr)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("train.epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be at least 1".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::Config(format!("train.grad_clip must be positive, got {c}")));
            }
        }
        Ok(())
    }

    pub fn optimizer_params(&self) -> OptimizerParams {
        OptimizerParams {
            kind: self.optimizer,
            lr: self.lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Everything needed to resume training. All randomness is derived from
/// `seed` and the step/epoch counters, so no generator state is stored.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    pub optimizer: OptimizerState,
    pub epoch: usize,
    pub step: usize,
    pub best_dev_f1: Option<f64>,
}

impl TrainState {
    pub fn new(model: &ModelConfig, train: &TrainConfig) -> Result<Self> {
        model.validate()?;
        train.validate()?;
        let params = init_params(model, train.seed)?;
        let optimizer = OptimizerState::new(train.optimizer, &params);
        Ok(TrainState {
            params,
            optimizer,
            epoch: 0,
            step: 0,
            best_dev_f1: None,
        })
    }
}

fn annotate(err: Error, step: usize, batch: &Batch) -> Error {
    match err {
        Error::Numerical(msg) => Error::Numerical(format!(
            "step {step}, source batch with sequences {:?}: {msg}",
            batch.indices
        )),
        other => other,
    }
}

/// One joint update. With `adaptation` off the domain head is neither
/// evaluated nor updated and `l_adv` is reported as 0.
pub fn train_step(
    state: &mut TrainState,
    model: &ModelConfig,
    source: &Batch,
    target: Option<&Batch>,
    config: &TrainConfig,
) -> Result<LossBreakdown> {
    let tags = source
        .tags
        .as_ref()
        .ok_or_else(|| Error::Contract("source batch has no tags".into()))?;
    if target.is_some_and(|t| t.tags.is_some()) {
        return Err(Error::Contract("target batch carries tags; the target corpus must be unlabelled".into()));
    }
    let target = if config.adaptation {
        Some(target.ok_or_else(|| Error::Contract("adaptation is on but no target batch was given".into()))?)
    } else {
        None
    };
    let step = state.step;
    let seed = mix(config.seed, step as u64);
    let mut g = Graph::new(model, &state.params, Some(seed))?;

    let forward = |g: &mut Graph<f32>| -> Result<_> {
        let fs = g.encode(source, 0)?;
        let logits = g.ner_logits(fs)?;
        let l_ner = ner_loss(&mut g.tape, logits, tags, &source.mask)?;
        match target {
            Some(t) => {
                let lambda = model.lambda_at(step);
                let ft = g.encode(t, 1)?;
                let ds = g.domain_logits(fs, &source.mask, lambda)?;
                let dt = g.domain_logits(ft, &t.mask, lambda)?;
                let l_adv = domain_loss(&mut g.tape, ds, Some(dt))?;
                let total = total_loss(&mut g.tape, l_ner, l_adv, config.alpha)?;
                let correct = correct_rows(g.tape.value(ds).data(), 0) + correct_rows(g.tape.value(dt).data(), 1);
                Ok((l_ner, Some(l_adv), total, correct))
            }
            None => Ok((l_ner, None, l_ner, 0)),
        }
    };
    let (l_ner, l_adv, total, correct) = forward(&mut g).map_err(|e| annotate(e, step, source))?;
    let grads = g.tape.backward(total).map_err(|e| annotate(e, step, source))?;

    let mut flat: Vec<Option<Tensor>> = state
        .params
        .params
        .iter()
        .zip(g.param_vars())
        .map(|(p, &v)| {
            if target.is_none() && p.group == ParamGroup::DomainHead {
                None
            } else {
                Some(grads.get_or_zeros(v, p.value.shape()))
            }
        })
        .collect();
    if let Some(bad) = flat
        .iter()
        .zip(&state.params.params)
        .find(|(g, _)| g.as_ref().is_some_and(|g| !g.all_finite()))
    {
        return Err(annotate(
            Error::Numerical(format!("non-finite gradient for {}", bad.1.name)),
            step,
            source,
        ));
    }
    if let Some(c) = config.grad_clip {
        clip_global_norm(&mut flat, c);
    }
    state
        .optimizer
        .step(&mut state.params, &flat, &config.optimizer_params())?;
    state.step += 1;

    let value = |v| g.tape.value(v).data()[0] as f64;
    Ok(LossBreakdown {
        l_ner: value(l_ner),
        l_adv: l_adv.map(value).unwrap_or(0.0),
        l_total: value(total),
        alpha: if target.is_some() { config.alpha } else { 0.0 },
        n_source_tokens: source.real_tokens(),
        n_source_seqs: source.rows(),
        n_target_seqs: target.map_or(0, Batch::rows),
        n_domain_correct: correct,
    })
}

/// Rows of a `[rows × 2]` score block whose argmax is `class` (ties go to
/// class 0).
fn correct_rows(scores: &[f32], class: usize) -> usize {
    scores
        .chunks(2)
        .filter(|r| usize::from(r[1] > r[0]) == class)
        .count()
}

/// Pairs every source batch with a target batch, cycling the target list
/// when it is shorter. Without adaptation the target side is `None`.
pub fn interleave<'a>(
    source: &'a [Batch],
    target: &'a [Batch],
    adaptation: bool,
) -> Result<Vec<(&'a Batch, Option<&'a Batch>)>> {
    if source.is_empty() {
        return Err(Error::Config("source stream is empty".into()));
    }
    if adaptation && target.is_empty() {
        return Err(Error::Config("adaptation needs a nonempty target stream".into()));
    }
    Ok(source
        .iter()
        .enumerate()
        .map(|(i, s)| (s, adaptation.then(|| &target[i % target.len()])))
        .collect())
}

/// Stops after `patience` consecutive epochs without a strict improvement.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<f64>,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: None,
            stale: 0,
        }
    }

    /// Records a score; returns `(improved, stop)`.
    pub fn update(&mut self, score: f64) -> (bool, bool) {
        if self.best.is_none_or(|b| score > b) {
            self.best = Some(score);
            self.stale = 0;
            (true, false)
        } else {
            self.stale += 1;
            (false, self.patience > 0 && self.stale >= self.patience)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub l_ner: f64,
    pub l_adv: f64,
    pub l_total: f64,
    pub alpha: f64,
    pub dev: Metrics,
    /// Discriminator accuracy over the epoch's training steps (adaptive
    /// runs only).
    pub domain_accuracy: Option<f64>,
    /// Discriminator accuracy on a fixed source/target probe after the
    /// epoch, dropout off.
    pub probe_domain_accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct FitOutput {
    /// State at the epoch with the best dev F1.
    pub best: TrainState,
    pub history: Vec<EpochRecord>,
    pub steps: Vec<LossBreakdown>,
}

/// Runs up to `config.epochs` epochs over `source_train`, evaluating on
/// `source_dev` after each. `target` is the unlabelled corpus; it is used
/// for training only when adaptation is on, and for the discriminator
/// accuracy probe whenever present.
pub fn fit(
    model: &ModelConfig,
    config: &TrainConfig,
    source_train: &[TokenSequence],
    source_dev: &[TokenSequence],
    target: Option<&[TokenSequence]>,
    vocab: &Vocab,
) -> Result<FitOutput> {
    if source_dev.iter().any(|s| s.tags.is_none()) {
        return Err(Error::Data("dev set must be labelled".into()));
    }
    if config.adaptation && target.is_none_or(|t| t.is_empty()) {
        return Err(Error::Config("adaptation is on but the target corpus is missing or empty".into()));
    }
    let mut state = TrainState::new(model, config)?;
    let probe_target = target.map(|t| &t[..t.len().min(config.probe_size)]);
    let probe_source = &source_train[..source_train.len().min(config.probe_size)];

    let mut best: Option<TrainState> = None;
    let mut stopper = EarlyStopping::new(config.early_stop_patience);
    let mut history = Vec::new();
    let mut steps = Vec::new();
    for epoch in 1..=config.epochs {
        let src = make_batches(source_train, vocab, config.batch_size, mix(config.seed, 2 * epoch as u64), true)?;
        let tgt = match target {
            Some(t) if config.adaptation => {
                make_batches(t, vocab, config.batch_size, mix(config.seed, 2 * epoch as u64 + 1), true)?
            }
            _ => Vec::new(),
        };
        let mut sums = [0.0f64; 3];
        let (mut correct, mut seen) = (0usize, 0usize);
        let pairs = interleave(&src, &tgt, config.adaptation)?;
        let n = pairs.len();
        for (i, (s, t)) in pairs.into_iter().enumerate() {
            let b = train_step(&mut state, model, s, t, config).map_err(|e| match e {
                Error::Numerical(m) => Error::Numerical(format!("epoch {epoch}, batch {i}: {m}")),
                other => other,
            })?;
            debug!("step {} l_ner {:.5} l_adv {:.5}", state.step, b.l_ner, b.l_adv);
            sums[0] += b.l_ner;
            sums[1] += b.l_adv;
            sums[2] += b.l_total;
            correct += b.n_domain_correct;
            seen += b.n_source_seqs + b.n_target_seqs;
            steps.push(b);
        }
        state.epoch = epoch;
        let dev = evaluate(&state.params, model, source_dev, vocab)?;
        let probe = match probe_target {
            Some(t) if !t.is_empty() => Some(domain_probe(&state.params, model, probe_source, t, vocab)?),
            _ => None,
        };
        let acc = config.adaptation.then(|| correct as f64 / seen as f64);
        info!(
            "epoch {epoch}: l_ner {:.4} l_adv {:.4} dev f1 {:.4} domain acc {} probe {}",
            sums[0] / n as f64,
            sums[1] / n as f64,
            dev.f1,
            acc.map_or("-".to_string(), |a| format!("{a:.3}")),
            probe.map_or("-".to_string(), |a| format!("{a:.3}"))
        );
        let f1 = dev.f1;
        history.push(EpochRecord {
            epoch,
            steps: n,
            l_ner: sums[0] / n as f64,
            l_adv: sums[1] / n as f64,
            l_total: sums[2] / n as f64,
            alpha: if config.adaptation { config.alpha } else { 0.0 },
            dev,
            domain_accuracy: acc,
            probe_domain_accuracy: probe,
        });
        let (improved, stop) = stopper.update(f1);
        if improved {
            state.best_dev_f1 = Some(f1);
            best = Some(state.clone());
        }
        if stop {
            info!("early stop after epoch {epoch}");
            break;
        }
    }
    Ok(FitOutput {
        best: best.unwrap_or(state),
        history,
        steps,
    })
}

/// Greedy per-token tag predictions, one vector per input sequence.
pub fn predict(
    params: &ModelParams,
    model: &ModelConfig,
    sequences: &[TokenSequence],
    vocab: &Vocab,
) -> Result<Vec<Vec<String>>> {
    if sequences.is_empty() {
        return Ok(Vec::new());
    }
    let batches = make_batches(sequences, vocab, EVAL_BATCH, 0, false)?;
    let per_batch = batches
        .par_iter()
        .map(|b| -> Result<Vec<Vec<String>>> {
            let mut g = Graph::new(model, params, None)?;
            let f = g.encode(b, 0)?;
            let logits = g.ner_logits(f)?;
            let scores = g.tape.value(logits).data();
            let c = model.n_tags;
            (0..b.rows())
                .map(|r| {
                    (0..b.row_len(r))
                        .map(|p| {
                            let row = &scores[(r * b.seq_len + p) * c..][..c];
                            let best = argmax(row);
                            vocab
                                .tag(best)
                                .map(str::to_string)
                                .ok_or_else(|| Error::Contract(format!("tag id {best} outside the tagset")))
                        })
                        .collect()
                })
                .collect()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_batch.into_iter().flatten().collect())
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Entity-level scores of the model on a labelled set, dropout off.
pub fn evaluate(
    params: &ModelParams,
    model: &ModelConfig,
    sequences: &[TokenSequence],
    vocab: &Vocab,
) -> Result<Metrics> {
    if sequences.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty dataset".into()));
    }
    let gold: Vec<Vec<String>> = sequences
        .iter()
        .enumerate()
        .map(|(i, s)| {
            s.tags
                .clone()
                .ok_or_else(|| Error::Data(format!("evaluation sentence {i} has no tags")))
        })
        .collect::<Result<_>>()?;
    let pred = predict(params, model, sequences, vocab)?;
    prf1(&pred, &gold)
}

/// Raw `[source, target]` discriminator scores for each sequence, dropout
/// off.
pub fn domain_scores(
    params: &ModelParams,
    model: &ModelConfig,
    sequences: &[TokenSequence],
    vocab: &Vocab,
) -> Result<Vec<[f32; 2]>> {
    let batches = make_batches(sequences, vocab, EVAL_BATCH, 0, false)?;
    let per_batch = batches
        .par_iter()
        .map(|b| -> Result<Vec<[f32; 2]>> {
            let mut g = Graph::new(model, params, None)?;
            let f = g.encode(b, 0)?;
            let d = g.domain_logits(f, &b.mask, model.grl_lambda)?;
            Ok(g.tape.value(d).data().chunks(2).map(|c| [c[0], c[1]]).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_batch.into_iter().flatten().collect())
}

/// Discriminator accuracy over `source` (class 0) and `target` (class 1).
pub fn domain_probe(
    params: &ModelParams,
    model: &ModelConfig,
    source: &[TokenSequence],
    target: &[TokenSequence],
    vocab: &Vocab,
) -> Result<f64> {
    let mut logits = domain_scores(params, model, source, vocab)?;
    logits.extend(domain_scores(params, model, target, vocab)?);
    let gold: Vec<Domain> = std::iter::repeat_n(Domain::Source, source.len())
        .chain(std::iter::repeat_n(Domain::Target, target.len()))
        .collect();
    domain_accuracy(&logits, &gold)
}
