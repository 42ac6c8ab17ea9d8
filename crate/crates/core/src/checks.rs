//! Gradient oracle suite behind the `gradcheck` command. Every tape op and
//! the full joint objective are compared in f64 against central differences.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{compare_central_differences, finite_diff_check, GradCheckOptions, Tape, Tensor, Var};
use crate::data::{Batch, Domain};
use crate::error::Result;
use crate::losses::{domain_loss, ner_loss, total_loss};
use crate::model::{init_params, Graph, ModelConfig, ModelParams, Param, ParamGroup};

pub const TOLERANCE: f64 = 1e-3;
pub const STEP: f64 = 1e-6;

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub coordinates: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub tolerance: f64,
    pub step: f64,
    pub max_rel_error: f64,
    pub passed: bool,
    pub checks: Vec<CheckResult>,
}

fn options() -> GradCheckOptions {
    GradCheckOptions {
        step: STEP,
        coords_per_param: 24,
        seed: 0,
    }
}

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new((0..n).map(|_| rng.random_range(-1.0..1.0)).collect(), shape.to_vec()).expect("shape matches")
}

/// Reduces `y` to a scalar with fixed random weights so that no output
/// coordinate has a symmetric (and therefore zero) gradient.
fn project(t: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let w = t.constant(random(t.shape(y), seed))?;
    let p = t.mul(y, w)?;
    t.sum(p)
}

type Case = (&'static str, Vec<Tensor<f64>>, Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>);

fn op_cases() -> Vec<Case> {
    let key_mask = vec![true, true, false, true, false, false];
    let pool_mask = vec![true, true, false, true, true, true];
    let gather_index = Rc::new(vec![5, 0, 0, 3, 2, 7]);
    vec![
        ("matmul", vec![random(&[3, 4], 1), random(&[4, 5], 2)], Box::new(|t, p| {
            let y = t.matmul(p[0], p[1])?;
            project(t, y, 10)
        })),
        ("batch_matmul", vec![random(&[2, 3, 4], 3), random(&[2, 4, 5], 4)], Box::new(|t, p| {
            let y = t.batch_matmul(p[0], p[1], false)?;
            project(t, y, 11)
        })),
        ("batch_matmul_trans_b", vec![random(&[2, 3, 4], 5), random(&[2, 5, 4], 6)], Box::new(|t, p| {
            let y = t.batch_matmul(p[0], p[1], true)?;
            project(t, y, 12)
        })),
        ("add", vec![random(&[3, 4], 7), random(&[3, 4], 8)], Box::new(|t, p| {
            let y = t.add(p[0], p[1])?;
            project(t, y, 13)
        })),
        ("mul", vec![random(&[3, 4], 9), random(&[3, 4], 10)], Box::new(|t, p| {
            let y = t.mul(p[0], p[1])?;
            project(t, y, 14)
        })),
        ("add_bias", vec![random(&[2, 3, 4], 11), random(&[4], 12)], Box::new(|t, p| {
            let y = t.add_bias(p[0], p[1])?;
            project(t, y, 15)
        })),
        ("scale", vec![random(&[3, 4], 13)], Box::new(|t, p| {
            let y = t.scale(p[0], -1.7)?;
            project(t, y, 16)
        })),
        ("sum", vec![random(&[3, 4], 14)], Box::new(|t, p| {
            let sq = t.mul(p[0], p[0])?;
            t.sum(sq)
        })),
        ("gelu", vec![random(&[3, 4], 15)], Box::new(|t, p| {
            let y = t.gelu(p[0])?;
            project(t, y, 17)
        })),
        ("tanh", vec![random(&[3, 4], 16)], Box::new(|t, p| {
            let y = t.tanh(p[0])?;
            project(t, y, 18)
        })),
        ("softmax", vec![random(&[2, 5, 3], 17)], Box::new(|t, p| {
            let y = t.softmax(p[0], 1)?;
            project(t, y, 19)
        })),
        ("masked_softmax", vec![random(&[4, 2, 3], 18)], Box::new(move |t, p| {
            let y = t.masked_softmax(p[0], &key_mask, 2)?;
            project(t, y, 20)
        })),
        ("layer_norm", vec![random(&[3, 6], 19), random(&[6], 20), random(&[6], 21)], Box::new(|t, p| {
            let y = t.layer_norm(p[0], p[1], p[2], 1e-5)?;
            project(t, y, 21)
        })),
        ("embedding", vec![random(&[6, 4], 22)], Box::new(|t, p| {
            let y = t.embedding(p[0], &[0, 3, 3, 5])?;
            project(t, y, 22)
        })),
        ("reshape", vec![random(&[2, 6], 23)], Box::new(|t, p| {
            let y = t.reshape(p[0], &[3, 4])?;
            project(t, y, 23)
        })),
        ("gather", vec![random(&[2, 4], 24)], Box::new(move |t, p| {
            let y = t.gather(p[0], gather_index.clone(), &[2, 3])?;
            project(t, y, 24)
        })),
        ("masked_mean_pool", vec![random(&[2, 3, 4], 25)], Box::new(move |t, p| {
            let y = t.masked_mean_pool(p[0], &pool_mask)?;
            project(t, y, 25)
        })),
        ("dropout", vec![random(&[4, 5], 26)], Box::new(|t, p| {
            let y = t.dropout(p[0], 0.3, 99)?;
            project(t, y, 26)
        })),
        ("nll", vec![random(&[4, 5], 27)], Box::new(|t, p| {
            t.nll(p[0], &[Some(1), None, Some(4), Some(0)], 3.0)
        })),
    ]
}

fn result(name: impl Into<String>, max_rel_error: f64, coordinates: usize) -> CheckResult {
    CheckResult {
        name: name.into(),
        max_rel_error,
        coordinates,
        passed: max_rel_error <= TOLERANCE,
    }
}

const GRL_LAMBDA: f64 = 0.7;

/// Reversal check: the backward pass must equal `-lambda` times the
/// derivative of the (identity) forward pass. With `as_identity` the
/// reversal is instead checked against the plain derivative, which must
/// fail; it exists to show the harness catches a sign or scale error.
fn grl_check(as_identity: bool) -> Result<CheckResult> {
    let params = vec![random(&[3, 4], 30)];
    let build = |t: &mut Tape<f64>, p: &[Var]| -> Result<Var> {
        let h = t.tanh(p[0])?;
        let r = t.gradient_reversal(h, GRL_LAMBDA)?;
        project(t, r, 31)
    };
    let mut tape = Tape::new();
    let x = tape.param(params[0].clone())?;
    let root = build(&mut tape, &[x])?;
    let analytic = tape.backward(root)?.get_or_zeros(x, params[0].shape());
    let factor = if as_identity { 1.0 } else { -GRL_LAMBDA };
    let eval = |p: &[Tensor<f64>]| -> Result<f64> {
        let mut t = Tape::new();
        let x = t.param(p[0].clone())?;
        let root = build(&mut t, &[x])?;
        Ok(factor * t.value(root).data()[0])
    };
    let report = compare_central_differences(&[analytic], &params, &[0], eval, options())?;
    let name = if as_identity {
        "fault:gradient_reversal_as_identity"
    } else {
        "gradient_reversal"
    };
    Ok(result(name, report.max_rel_error, report.coordinates_checked))
}

fn toy_batch(rows: &[&[usize]], n_tags: usize, domain: Domain) -> Batch {
    let seq_len = rows.iter().map(|r| r.len()).max().unwrap_or(0);
    let mut tokens = vec![0; rows.len() * seq_len];
    let mut mask = vec![false; rows.len() * seq_len];
    let mut tags = vec![0; rows.len() * seq_len];
    for (r, row) in rows.iter().enumerate() {
        for (i, &tok) in row.iter().enumerate() {
            tokens[r * seq_len + i] = tok;
            mask[r * seq_len + i] = true;
            tags[r * seq_len + i] = (tok * 7 + i) % n_tags;
        }
    }
    Batch {
        tokens,
        mask,
        tags: (domain == Domain::Source).then_some(tags),
        domains: vec![domain; rows.len()],
        indices: (0..rows.len()).collect(),
        seq_len,
    }
}

const ALPHA: f64 = 2.0;

/// The whole model: one backward pass through `l_ner + alpha·l_adv` with a
/// reversal of strength `lambda`. The expected gradients are those of the
/// total loss for the NER and domain heads and those of
/// `l_ner − alpha·lambda·l_adv` for the feature extractor.
fn full_model_checks() -> Result<Vec<CheckResult>> {
    let cfg = ModelConfig {
        vocab_size: 12,
        d_model: 8,
        n_heads: 2,
        n_layers: 2,
        d_ff: 16,
        max_len: 8,
        n_tags: 5,
        dropout: 0.1,
        grl_lambda: 0.6,
        grl_warmup_steps: 0,
    };
    let lambda = cfg.grl_lambda;
    let source = toy_batch(&[&[2, 5, 7], &[3, 4, 9, 11]], cfg.n_tags, Domain::Source);
    let target = toy_batch(&[&[6, 8], &[10, 2, 3, 1]], cfg.n_tags, Domain::Target);
    let base: ModelParams<f64> = init_params(&cfg, 5)?.cast();
    let names: Vec<(String, ParamGroup)> = base.params.iter().map(|p| (p.name.clone(), p.group)).collect();

    let forward = |params: &ModelParams<f64>| -> Result<(Graph<'_, f64>, Var, Var, Var)> {
        let mut g = Graph::new(&cfg, params, Some(17))?;
        let fs = g.encode(&source, 0)?;
        let logits = g.ner_logits(fs)?;
        let l_ner = ner_loss(&mut g.tape, logits, source.tags.as_deref().unwrap_or(&[]), &source.mask)?;
        let ft = g.encode(&target, 1)?;
        let ds = g.domain_logits(fs, &source.mask, lambda)?;
        let dt = g.domain_logits(ft, &target.mask, lambda)?;
        let l_adv = domain_loss(&mut g.tape, ds, Some(dt))?;
        let total = total_loss(&mut g.tape, l_ner, l_adv, ALPHA)?;
        Ok((g, l_ner, l_adv, total))
    };
    let rebuild = |values: &[Tensor<f64>]| ModelParams {
        params: names
            .iter()
            .zip(values)
            .map(|((name, group), v)| Param {
                name: name.clone(),
                group: *group,
                value: v.clone(),
            })
            .collect(),
    };

    let (g, _, _, total) = forward(&base)?;
    let grads = g.tape.backward(total)?;
    let analytic: Vec<Tensor<f64>> = base
        .params
        .iter()
        .zip(g.param_vars())
        .map(|(p, &v)| grads.get_or_zeros(v, p.value.shape()))
        .collect();
    let values: Vec<Tensor<f64>> = base.params.iter().map(|p| p.value.clone()).collect();

    let mut out = Vec::new();
    for (group, label, adv_weight) in [
        (ParamGroup::FeatureExtractor, "model:theta_f", -ALPHA * lambda),
        (ParamGroup::NerHead, "model:theta_n", ALPHA),
        (ParamGroup::DomainHead, "model:theta_d", ALPHA),
    ] {
        // Attention key biases shift every score of a query row equally, so
        // softmax makes their gradient identically zero; central differences
        // there measure round-off only. They are checked separately below.
        let which: Vec<usize> = base
            .group_indices(group)
            .filter(|&i| !base.params[i].name.ends_with("attn.bk"))
            .collect();
        let eval = |v: &[Tensor<f64>]| -> Result<f64> {
            let params = rebuild(v);
            let (g, l_ner, l_adv, _) = forward(&params)?;
            Ok(g.tape.value(l_ner).data()[0] + adv_weight * g.tape.value(l_adv).data()[0])
        };
        let opts = GradCheckOptions {
            coords_per_param: 6,
            ..options()
        };
        let report = compare_central_differences(&analytic, &values, &which, eval, opts)?;
        out.push(result(label, report.max_rel_error, report.coordinates_checked));
    }
    let key_bias: Vec<&Tensor<f64>> = base
        .params
        .iter()
        .zip(&analytic)
        .filter(|(p, _)| p.name.ends_with("attn.bk"))
        .map(|(_, g)| g)
        .collect();
    let largest = key_bias.iter().flat_map(|g| g.data()).fold(0.0f64, |m, v| m.max(v.abs()));
    out.push(CheckResult {
        name: "model:attn_key_bias_zero".into(),
        max_rel_error: largest,
        coordinates: key_bias.iter().map(|g| g.len()).sum(),
        passed: largest < 1e-12,
    });
    Ok(out)
}

/// Runs every check. `inject_fault` adds a deliberately wrong expectation
/// that must fail.
pub fn run_suite(inject_fault: bool) -> Result<SuiteReport> {
    let mut checks = Vec::new();
    for (name, params, build) in op_cases() {
        let report = finite_diff_check(|t, p| build(t, p), &params, options())?;
        checks.push(result(name, report.max_rel_error, report.coordinates_checked));
    }
    checks.push(grl_check(false)?);
    checks.extend(full_model_checks()?);
    if inject_fault {
        checks.push(grl_check(true)?);
    }
    let max_rel_error = checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    Ok(SuiteReport {
        tolerance: TOLERANCE,
        step: STEP,
        max_rel_error,
        passed: checks.iter().all(|c| c.passed),
        checks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        let report = run_suite(false).unwrap();
        for c in &report.checks {
            assert!(c.passed, "{}: {}", c.name, c.max_rel_error);
            assert!(c.coordinates > 0, "{}", c.name);
        }
        assert!(report.passed);
    }

    #[test]
    fn injected_fault_is_caught() {
        let report = run_suite(true).unwrap();
        assert!(!report.passed);
        let fault = report.checks.last().unwrap();
        assert!(!fault.passed);
        assert!(fault.max_rel_error > 0.5, "{}", fault.max_rel_error);
    }
}
