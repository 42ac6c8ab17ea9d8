//! Acceptance criteria. Runs without the libtest harness so that every
//! criterion prints exactly one PASS/FAIL line; positional arguments select
//! criteria by substring.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use advner::checks::run_suite;
use advner::cli::cmd_train;
use advner::config::ExperimentConfig;
use advner::data::{is_valid_iob, make_batches, to_iob, Domain, TagScheme, TokenSequence};
use advner::experiment::{run_experiment, synth_corpora, ModeSection};
use advner::losses::{domain_loss, LossBreakdown};
use advner::metrics::{extract_entities, prf1, EntitySpan};
use advner::model::{init_params, Graph, ModelConfig, ModelParams, ParamGroup};
use advner::synth::PairMode;
use advner::trainer::{evaluate, fit, load_checkpoint, predict, save_checkpoint, train_step, TrainConfig, TrainState};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);
type FixtureCase = (Vec<&'static str>, Vec<(&'static str, usize, usize)>);

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(start: Instant, limit: Duration, what: &str) -> Result<(), String> {
    let took = start.elapsed();
    ensure(took <= limit, format!("{what} took {took:.1?}, limit {limit:?}"))
}

fn gradient_oracle() -> Outcome {
    let start = Instant::now();
    let report = run_suite(false).map_err(|e| e.to_string())?;
    within(start, Duration::from_secs(60), "gradient suite")?;
    let failed: Vec<&str> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    ensure(failed.is_empty(), format!("failing checks: {failed:?}"))?;
    ensure(report.max_rel_error < 1e-3, format!("max rel err {:e}", report.max_rel_error))?;
    Ok(format!(
        "{} checks, max rel err {:.2e}, {:.1?}",
        report.checks.len(),
        report.max_rel_error,
        start.elapsed()
    ))
}

/// Feature-extractor gradients of the domain loss, with the reversal in
/// place (`Some(lambda)`) or with the discriminator attached directly.
fn feature_grads(
    cfg: &ModelConfig,
    params: &ModelParams<f64>,
    s: &advner::data::Batch,
    t: &advner::data::Batch,
    lambda: Option<f64>,
) -> Result<Vec<Vec<f64>>, String> {
    let mut g = Graph::new(cfg, params, None).map_err(|e| e.to_string())?;
    let mut logits = Vec::new();
    for (b, stream) in [(s, 0), (t, 1)] {
        let f = g.encode(b, stream).map_err(|e| e.to_string())?;
        let pooled = g.tape.masked_mean_pool(f, &b.mask).map_err(|e| e.to_string())?;
        let input = match lambda {
            Some(l) => {
                let r = g.tape.gradient_reversal(pooled, l).map_err(|e| e.to_string())?;
                let (a, b) = (g.tape.value(pooled).data(), g.tape.value(r).data());
                ensure(
                    a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()),
                    "reversal forward is not the identity",
                )?;
                r
            }
            None => pooled,
        };
        logits.push(g.domain_head(input).map_err(|e| e.to_string())?);
    }
    let loss = domain_loss(&mut g.tape, logits[0], Some(logits[1])).map_err(|e| e.to_string())?;
    let grads = g.tape.backward(loss).map_err(|e| e.to_string())?;
    Ok(params
        .group_indices(ParamGroup::FeatureExtractor)
        .map(|i| {
            grads
                .get_or_zeros(g.param_vars()[i], params.params[i].value.shape())
                .data()
                .to_vec()
        })
        .collect())
}

fn grl_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    let (mut checked, mut zeros) = (0usize, 0usize);
    for trial in 0..10 {
        let heads = [1, 2, 4][rng.random_range(0..3)];
        let d_model = heads * rng.random_range(2..6);
        let mut cfg = ExperimentConfig::default();
        cfg.synth.source.n_sentences = 40;
        cfg.synth.target.n_sentences = 40;
        cfg.synth.dev_sentences = 4;
        cfg.synth.test_sentences = 4;
        cfg.model = ModelConfig {
            d_model,
            n_heads: heads,
            n_layers: rng.random_range(1..3),
            d_ff: 2 * d_model,
            ..Default::default()
        };
        let lambda = rng.random_range(0.05..2.0);
        let prepared = synth_corpora(&cfg, trial, PairMode::Different).map_err(|e| e.to_string())?;
        let rows = rng.random_range(1..5);
        let s = make_batches(&prepared.train, &prepared.vocab, rows, trial, true).map_err(|e| e.to_string())?;
        let t = make_batches(prepared.target.as_ref().unwrap(), &prepared.vocab, rows, trial + 7, true)
            .map_err(|e| e.to_string())?;
        let params: ModelParams<f64> = init_params(&prepared.model, trial).map_err(|e| e.to_string())?.cast();
        let reversed = feature_grads(&prepared.model, &params, &s[0], &t[0], Some(lambda))?;
        let plain = feature_grads(&prepared.model, &params, &s[0], &t[0], None)?;
        // Attention key biases have an exactly zero gradient (softmax ignores
        // a per-row shift), so both sides hold round-off only; they must be
        // negligible rather than proportional.
        let scale = plain.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
        let features: Vec<usize> = params.group_indices(ParamGroup::FeatureExtractor).collect();
        for ((r, p), &i) in reversed.iter().zip(&plain).zip(&features) {
            let key_bias = params.params[i].name.ends_with("attn.bk");
            for (r, p) in r.iter().zip(p) {
                let expected = -lambda * p;
                if key_bias {
                    ensure(
                        r.abs().max(expected.abs()) <= 1e-12 * scale,
                        format!("{} gradient {r:e} is not negligible", params.params[i].name),
                    )?;
                    zeros += 1;
                } else if *r != expected {
                    worst = worst.max((r - expected).abs() / r.abs().max(expected.abs()));
                }
                checked += 1;
            }
        }
    }
    ensure(worst < 1e-5, format!("max elementwise rel err {worst:e}"))?;
    Ok(format!(
        "10 configurations, forward bit-exact, max rel err {worst:.2e} over {checked} entries ({zeros} structurally zero)"
    ))
}

fn read_steps(path: &Path) -> Result<Vec<LossBreakdown>, String> {
    std::fs::read_to_string(path)
        .map_err(|e| e.to_string())?
        .lines()
        .map(|l| serde_json::from_str(l).map_err(|e| e.to_string()))
        .collect()
}

fn small_train_config(dir: &Path) -> ExperimentConfig {
    let overrides: Vec<String> = [
        "train.epochs=3",
        "train.batch_size=16",
        "synth.source.n_sentences=300",
        "synth.target.n_sentences=300",
        "synth.dev_sentences=60",
        "synth.test_sentences=60",
        "model.d_model=32",
        "model.d_ff=64",
    ]
    .iter()
    .map(|s| s.to_string())
    .chain([format!("output_dir={}", dir.display())])
    .collect();
    ExperimentConfig::load(None, &overrides).expect("valid config")
}

fn loss_composition() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = small_train_config(dir.path());
    ensure(cfg.train.alpha == 2.0, "default alpha is not 2")?;
    cmd_train(&cfg).map_err(|e| e.to_string())?;
    let steps = read_steps(&dir.path().join("steps.jsonl"))?;
    ensure(!steps.is_empty(), "no steps logged")?;
    let mut worst = 0.0f64;
    for (i, s) in steps.iter().enumerate() {
        ensure(s.alpha == 2.0, format!("step {i} logged alpha {}", s.alpha))?;
        ensure(s.l_adv > 0.0, format!("step {i} has no domain term"))?;
        worst = worst.max((s.l_total - (s.l_ner + 2.0 * s.l_adv)).abs());
    }
    ensure(worst < 1e-5, format!("max residual {worst:e}"))?;
    Ok(format!("{} logged steps, max |l_total - (l_ner + 2 l_adv)| = {worst:.2e}", steps.len()))
}

/// Chunk boundaries by the conlleval rules, evaluated independently for
/// every candidate span.
fn brute_force_spans(tags: &[String]) -> BTreeSet<EntitySpan> {
    let split = |t: &str| -> Option<(char, String)> {
        (t != "O").then(|| (t.chars().next().unwrap(), t[2..].to_string()))
    };
    let continues = |k: usize| -> bool {
        k > 0
            && matches!((split(&tags[k]), split(&tags[k - 1])), (Some(('I', a)), Some((_, b))) if a == b)
    };
    let mut out = BTreeSet::new();
    for s in 0..tags.len() {
        let Some((_, kind)) = split(&tags[s]) else { continue };
        if continues(s) {
            continue;
        }
        for e in s + 1..=tags.len() {
            if (s + 1..e).all(continues) && (e == tags.len() || !continues(e)) {
                out.insert(EntitySpan {
                    kind: kind.clone(),
                    start: s,
                    end: e,
                });
            }
        }
    }
    out
}

fn random_tags(rng: &mut ChaCha8Rng, n: usize) -> Vec<String> {
    const TAGS: [&str; 7] = ["O", "B-PER", "I-PER", "B-LOC", "I-LOC", "B-ORG", "I-ORG"];
    (0..n).map(|_| TAGS[rng.random_range(0..TAGS.len())].to_string()).collect()
}

fn conlleval_fixture() -> Vec<FixtureCase> {
    vec![
        (vec!["O"], vec![]),
        (vec!["B-PER"], vec![("PER", 0, 1)]),
        (vec!["I-PER"], vec![("PER", 0, 1)]),
        (vec!["O", "I-PER"], vec![("PER", 1, 2)]),
        (vec!["B-PER", "I-PER"], vec![("PER", 0, 2)]),
        (vec!["B-PER", "I-LOC"], vec![("PER", 0, 1), ("LOC", 1, 2)]),
        (vec!["I-PER", "I-PER"], vec![("PER", 0, 2)]),
        (vec!["I-PER", "B-PER"], vec![("PER", 0, 1), ("PER", 1, 2)]),
        (vec!["B-PER", "B-PER"], vec![("PER", 0, 1), ("PER", 1, 2)]),
        (vec!["B-LOC", "I-LOC", "O", "I-LOC"], vec![("LOC", 0, 2), ("LOC", 3, 4)]),
        (vec!["I-ORG", "I-LOC", "I-LOC"], vec![("ORG", 0, 1), ("LOC", 1, 3)]),
        (vec!["O", "O", "O"], vec![]),
        (vec!["B-PER", "O", "I-PER", "I-PER"], vec![("PER", 0, 1), ("PER", 2, 4)]),
        (vec!["B-MISC", "I-MISC", "I-MISC", "B-MISC"], vec![("MISC", 0, 3), ("MISC", 3, 4)]),
        (vec!["I-LOC", "O", "B-LOC", "I-PER"], vec![("LOC", 0, 1), ("LOC", 2, 3), ("PER", 3, 4)]),
        (vec![], vec![]),
        (vec!["B-PER", "I-PER", "I-LOC", "I-LOC", "O"], vec![("PER", 0, 2), ("LOC", 2, 4)]),
        (vec!["O", "B-ORG", "I-ORG", "I-ORG"], vec![("ORG", 1, 4)]),
        (
            vec!["I-PER", "I-PER", "B-LOC", "I-LOC", "I-PER"],
            vec![("PER", 0, 2), ("LOC", 2, 4), ("PER", 4, 5)],
        ),
        (
            vec!["B-ORG", "I-PER", "B-ORG", "I-ORG"],
            vec![("ORG", 0, 1), ("PER", 1, 2), ("ORG", 2, 4)],
        ),
    ]
}

fn metrics_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for case in 0..1000 {
        let sentences = rng.random_range(1..6);
        let lens: Vec<usize> = (0..sentences).map(|_| rng.random_range(0..12)).collect();
        let gold: Vec<Vec<String>> = lens.iter().map(|&n| random_tags(&mut rng, n)).collect();
        let pred: Vec<Vec<String>> = lens.iter().map(|&n| random_tags(&mut rng, n)).collect();
        let m = prf1(&pred, &gold).map_err(|e| e.to_string())?;
        let (mut tp, mut np, mut ng) = (0, 0, 0);
        for (p, g) in pred.iter().zip(&gold) {
            let (p, g) = (brute_force_spans(p), brute_force_spans(g));
            tp += p.intersection(&g).count();
            np += p.len();
            ng += g.len();
        }
        ensure(
            (m.tp, m.fp, m.fn_) == (tp, np - tp, ng - tp),
            format!("case {case}: prf1 {:?} vs oracle {:?}", (m.tp, m.fp, m.fn_), (tp, np - tp, ng - tp)),
        )?;
    }
    let fixture = conlleval_fixture();
    for (i, (tags, expected)) in fixture.iter().enumerate() {
        let expected: BTreeSet<EntitySpan> = expected
            .iter()
            .map(|&(k, s, e)| EntitySpan {
                kind: k.into(),
                start: s,
                end: e,
            })
            .collect();
        let got: BTreeSet<EntitySpan> = extract_entities(tags).into_iter().collect();
        ensure(got == expected, format!("fixture case {i} {tags:?}: got {got:?}"))?;
        let repaired = to_iob(tags, TagScheme::Iob2).map_err(|e| e.to_string())?;
        let via_repair: BTreeSet<EntitySpan> = extract_entities(&repaired).into_iter().collect();
        ensure(via_repair == expected, format!("fixture case {i}: repair changed spans"))?;
    }
    Ok(format!("1000 random pairs exact, {} conlleval cases", fixture.len()))
}

fn scheme_tags(scheme: TagScheme) -> BoxedStrategy<Vec<String>> {
    let prefixes: &'static [&'static str] = match scheme {
        TagScheme::Iob1 | TagScheme::Iob2 => &["B", "I"],
        TagScheme::Bilou => &["B", "I", "L", "U", "E", "S"],
        TagScheme::TokenClass => &[""],
    };
    let tag = (0..=prefixes.len(), 0usize..3).prop_map(move |(p, t)| {
        let kind = ["PER", "LOC", "ORG"][t];
        match prefixes.get(p) {
            None => "O".to_string(),
            Some(&"") => kind.to_string(),
            Some(pre) => format!("{pre}-{kind}"),
        }
    });
    proptest::collection::vec(tag, 0..16).boxed()
}

/// Non-overlapping typed spans over `n` tokens.
fn span_layout() -> impl Strategy<Value = (usize, Vec<(usize, usize, usize)>)> {
    proptest::collection::vec((0usize..3, 1usize..4, 0usize..3), 0..6).prop_map(|pieces| {
        let mut at = 0;
        let mut spans = Vec::new();
        for (gap, len, kind) in pieces {
            at += gap;
            spans.push((at, at + len, kind));
            at += len;
        }
        (at + 1, spans)
    })
}

fn iob_pipeline() -> Outcome {
    let schemes = [TagScheme::Iob1, TagScheme::Iob2, TagScheme::Bilou, TagScheme::TokenClass];
    let mut runner = TestRunner::new(Config {
        cases: 10_000,
        failure_persistence: None,
        ..Config::default()
    });
    let strategy = (0usize..4).prop_flat_map(move |i| (Just(schemes[i]), scheme_tags(schemes[i])));
    runner
        .run(&strategy, |(scheme, tags)| {
            let out = to_iob(&tags, scheme).unwrap();
            prop_assert_eq!(out.len(), tags.len());
            prop_assert!(is_valid_iob(&out), "{:?} -> {:?}", tags, out);
            prop_assert_eq!(to_iob(&out, TagScheme::Iob2).unwrap(), out);
            Ok(())
        })
        .map_err(|e| format!("grammar/idempotence: {e}"))?;

    let mut runner = TestRunner::new(Config {
        cases: 2_000,
        failure_persistence: None,
        ..Config::default()
    });
    runner
        .run(&span_layout(), |(n, spans)| {
            let kinds = ["PER", "LOC", "ORG"];
            let mut bilou = vec!["O".to_string(); n];
            let mut expected = BTreeSet::new();
            for &(s, e, k) in &spans {
                let kind = kinds[k];
                for (i, tag) in bilou.iter_mut().enumerate().take(e).skip(s) {
                    let pre = match (i == s, i + 1 == e) {
                        (true, true) => "U",
                        (true, false) => "B",
                        (false, true) => "L",
                        (false, false) => "I",
                    };
                    *tag = format!("{pre}-{kind}");
                }
                expected.insert(EntitySpan {
                    kind: kind.into(),
                    start: s,
                    end: e,
                });
            }
            let iob = to_iob(&bilou, TagScheme::Bilou).unwrap();
            let got: BTreeSet<EntitySpan> = extract_entities(&iob).into_iter().collect();
            prop_assert_eq!(got, expected);
            Ok(())
        })
        .map_err(|e| format!("BILOU spans: {e}"))?;
    Ok("10000 grammar/idempotence cases, 2000 BILOU span cases".into())
}

fn overfit() -> Outcome {
    let start = Instant::now();
    let mut cfg = ExperimentConfig::default();
    cfg.synth.source.n_sentences = 32;
    cfg.synth.dev_sentences = 8;
    cfg.synth.test_sentences = 8;
    cfg.model = ModelConfig {
        d_model: 64,
        n_heads: 4,
        n_layers: 2,
        d_ff: 128,
        ..Default::default()
    };
    let prepared = synth_corpora(&cfg, 1, PairMode::Same).map_err(|e| e.to_string())?;
    let train = TrainConfig {
        adaptation: false,
        batch_size: 32,
        seed: 1,
        ..Default::default()
    };
    let mut state = TrainState::new(&prepared.model, &train).map_err(|e| e.to_string())?;
    let batch = make_batches(&prepared.train, &prepared.vocab, 32, 0, false).map_err(|e| e.to_string())?;
    ensure(batch.len() == 1 && batch[0].rows() == 32, "toy corpus is not one batch of 32")?;
    let mut f1 = 0.0;
    for step in 1..=200 {
        train_step(&mut state, &prepared.model, &batch[0], None, &train).map_err(|e| e.to_string())?;
        if step % 5 == 0 {
            f1 = evaluate(&state.params, &prepared.model, &prepared.train, &prepared.vocab)
                .map_err(|e| e.to_string())?
                .f1;
            if f1 > 0.99 {
                within(start, Duration::from_secs(120), "overfit run")?;
                return Ok(format!("train F1 {f1:.4} after {step} steps, {:.1?}", start.elapsed()));
            }
        }
    }
    Err(format!("train F1 {f1:.4} after 200 steps"))
}

/// Settings for the synthetic comparison; see the README for why the
/// reversal strength is 0.1.
fn comparison_config(seeds: &[u64], modes: &[PairMode]) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.model.grl_lambda = 0.1;
    cfg.train.epochs = 8;
    cfg.train.early_stop_patience = 0;
    cfg.experiment.seeds = seeds.to_vec();
    cfg.experiment.modes = modes.to_vec();
    cfg
}

fn mean_adapted(section: &ModeSection, seeds: &[u64]) -> f64 {
    let picked: Vec<f64> = section
        .rows
        .iter()
        .filter(|r| seeds.contains(&r.seed))
        .map(|r| r.adapted.test_f1)
        .collect();
    picked.iter().sum::<f64>() / picked.len() as f64
}

fn directional_and_ordering() -> (Outcome, Outcome) {
    let start = Instant::now();
    let different = match run_experiment(&comparison_config(&[1, 2, 3, 4, 5], &[PairMode::Different])) {
        Ok(r) => r.sections.into_iter().next().expect("one section"),
        Err(e) => return (Err(e.to_string()), Err("directional run failed".into())),
    };
    let took = start.elapsed();
    let directional = (|| {
        ensure(different.rows.len() == 5, "expected 5 seeds")?;
        let detail = format!(
            "adapted {:.4} vs baseline {:.4} (delta {:+.4}), domain acc dropped in {}/5 seeds, {:.0?}",
            different.adapted_f1.mean, different.baseline_f1.mean, different.mean_delta, different.domain_accuracy_dropped, took
        );
        ensure(different.mean_delta > 0.0, format!("adapted does not beat baseline: {detail}"))?;
        ensure(different.domain_accuracy_dropped >= 4, format!("domain accuracy: {detail}"))?;
        ensure(took <= Duration::from_secs(30 * 60), format!("too slow: {detail}"))?;
        Ok(detail)
    })();

    let seeds = [1, 2, 3];
    let ordering = match run_experiment(&comparison_config(&seeds, &[PairMode::Same, PairMode::Mixed])) {
        Ok(r) => (|| {
            let same = mean_adapted(&r.sections[0], &seeds);
            let mixed = mean_adapted(&r.sections[1], &seeds);
            let diff = mean_adapted(&different, &seeds);
            let detail = format!(
                "adapted mean F1 same {same:.4}, mixed {mixed:.4}, different {diff:.4}; same {} mixed",
                if same >= mixed { ">=" } else { "<" }
            );
            ensure(same >= diff, format!("same < different: {detail}"))?;
            Ok(detail)
        })(),
        Err(e) => Err(e.to_string()),
    };
    (directional, ordering)
}

fn files_equal(a: &Path, b: &Path, names: &[&str]) -> Result<(), String> {
    for n in names {
        let x = std::fs::read(a.join(n)).map_err(|e| format!("{n}: {e}"))?;
        let y = std::fs::read(b.join(n)).map_err(|e| format!("{n}: {e}"))?;
        ensure(x == y, format!("{n} differs"))?;
    }
    Ok(())
}

fn determinism() -> Outcome {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    cmd_train(&small_train_config(a.path())).map_err(|e| e.to_string())?;
    cmd_train(&small_train_config(b.path())).map_err(|e| e.to_string())?;
    files_equal(a.path(), b.path(), &["history.jsonl", "steps.jsonl", "report.json"])?;
    let files = ["manifest.json", "params.bin", "moments.bin", "vocab.json"];
    files_equal(&a.path().join("checkpoint"), &b.path().join("checkpoint"), &files)?;
    Ok("history.jsonl, steps.jsonl, report.json and all checkpoint files identical".into())
}

fn checkpoint_round_trip() -> Outcome {
    let mut cfg = small_train_config(Path::new("unused"));
    cfg.train.epochs = 4;
    let prepared = synth_corpora(&cfg, 3, PairMode::Different).map_err(|e| e.to_string())?;
    let out = fit(
        &prepared.model,
        &cfg.train,
        &prepared.train,
        &prepared.dev,
        prepared.target.as_deref(),
        &prepared.vocab,
    )
    .map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    save_checkpoint(dir.path(), &out.best, &prepared.model, &cfg.train, &prepared.vocab, &cfg.echo())
        .map_err(|e| e.to_string())?;
    let loaded = load_checkpoint(dir.path()).map_err(|e| e.to_string())?;
    ensure(loaded.state == out.best, "loaded state differs")?;
    let test: &[TokenSequence] = prepared.test.as_deref().unwrap_or(&[]);
    let before = evaluate(&out.best.params, &prepared.model, test, &prepared.vocab).map_err(|e| e.to_string())?;
    let after = evaluate(&loaded.state.params, &loaded.manifest.model, test, &loaded.vocab).map_err(|e| e.to_string())?;
    ensure(before == after, "metrics differ after reload")?;
    let p1 = predict(&out.best.params, &prepared.model, test, &prepared.vocab).map_err(|e| e.to_string())?;
    let p2 = predict(&loaded.state.params, &loaded.manifest.model, test, &loaded.vocab).map_err(|e| e.to_string())?;
    ensure(p1 == p2, "predictions differ after reload")?;
    ensure(test.iter().all(|s| s.domain == Domain::Source), "test set domain")?;
    Ok(format!("test F1 {:.4} identical before and after reload", after.f1))
}

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into());
        Err(format!("panicked: {msg}"))
    })
}

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted = |name: &str| filters.is_empty() || filters.iter().any(|f| name.contains(f.as_str()));
    let singles: [Criterion; 8] = [
        ("gradient oracle", gradient_oracle),
        ("grl identity", grl_identity),
        ("loss composition", loss_composition),
        ("metrics oracle", metrics_oracle),
        ("iob pipeline", iob_pipeline),
        ("overfit sanity", overfit),
        ("determinism", determinism),
        ("checkpoint round-trip", checkpoint_round_trip),
    ];
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    for (name, f) in singles {
        if wanted(name) {
            let r = guarded(f);
            report(name, &r);
            results.push((name, r));
        }
    }
    if wanted("directional replication") || wanted("ordering probe") {
        let (d, o) = catch_unwind(directional_and_ordering).unwrap_or_else(|_| {
            let e = || Err("panicked".to_string());
            (e(), e())
        });
        for (name, r) in [("directional replication", d), ("ordering probe", o)] {
            report(name, &r);
            results.push((name, r));
        }
    }
    let failed = results.iter().filter(|(_, r)| r.is_err()).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn report(name: &str, r: &Outcome) {
    match r {
        Ok(detail) => println!("PASS  {name}: {detail}"),
        Err(why) => println!("FAIL  {name}: {why}"),
    }
}
