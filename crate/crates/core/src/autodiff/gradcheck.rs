//! Central-difference gradient checking.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Result of comparing analytic and central-difference gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(parameter index, flat coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub coordinates_checked: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Coordinates sampled per parameter; tensors at or below this size are
    /// checked exhaustively.
    pub coords_per_param: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-3,
            coords_per_param: 32,
            seed: 0,
        }
    }
}

/// Relative error used throughout: `|a − n| / (|a| + |n| + 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-8)
}

fn evaluate<T, F>(f: &F, params: &[Tensor<T>]) -> Result<(Tape<T>, Vec<Var>, Var)>
where
    T: Real,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = params
        .iter()
        .map(|p| tape.param(p.clone()))
        .collect::<Result<Vec<_>>>()?;
    let root = f(&mut tape, &vars)?;
    let value = tape
        .value(root)
        .item()
        .ok_or_else(|| Error::Contract("gradient check function must return a scalar".into()))?;
    if !value.is_finite() {
        return Err(Error::Numerical("gradient check function returned a non-finite value".into()));
    }
    Ok((tape, vars, root))
}

fn scalar_at<T, F>(f: &F, params: &[Tensor<T>]) -> Result<f64>
where
    T: Real,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let (tape, _, root) = evaluate(f, params)?;
    Ok(tape.value(root).data()[0].to_f64())
}

/// Max relative error between backward-pass gradients of the scalar graph
/// built by `f` and central differences with step `options.step`.
pub fn finite_diff_check<T, F>(f: F, params: &[Tensor<T>], options: GradCheckOptions) -> Result<GradCheckReport>
where
    T: Real,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let (tape, vars, root) = evaluate(&f, params)?;
    let grads = tape.backward(root)?;
    let analytic: Vec<Tensor<T>> = params
        .iter()
        .zip(&vars)
        .map(|(p, v)| grads.get_or_zeros(*v, p.shape()))
        .collect();
    let all: Vec<usize> = (0..params.len()).collect();
    compare_central_differences(&analytic, params, &all, |p| scalar_at(&f, p), options)
}

/// Compares given `analytic` gradients of the parameters listed in `which`
/// against central differences of the scalar function `eval`.
pub fn compare_central_differences<T, E>(
    analytic: &[Tensor<T>],
    params: &[Tensor<T>],
    which: &[usize],
    eval: E,
    options: GradCheckOptions,
) -> Result<GradCheckReport>
where
    T: Real,
    E: Fn(&[Tensor<T>]) -> Result<f64>,
{
    if !(options.step > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {}", options.step)));
    }
    if analytic.len() != params.len() {
        return Err(Error::Contract(format!(
            "{} analytic gradients for {} parameters",
            analytic.len(),
            params.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coordinates_checked: 0,
    };
    let mut work: Vec<Tensor<T>> = params.to_vec();
    for &pi in which {
        let param = &params[pi];
        let coords: Vec<usize> = if param.len() <= options.coords_per_param {
            (0..param.len()).collect()
        } else {
            let mut c = sample(&mut rng, param.len(), options.coords_per_param).into_vec();
            c.sort_unstable();
            c
        };
        for c in coords {
            let original = param.data()[c];
            work[pi].data_mut()[c] = T::from_f64(original.to_f64() + options.step);
            let plus = eval(&work)?;
            work[pi].data_mut()[c] = T::from_f64(original.to_f64() - options.step);
            let minus = eval(&work)?;
            work[pi].data_mut()[c] = original;

            let numeric = (plus - minus) / (2.0 * options.step);
            let err = relative_error(analytic[pi].data()[c].to_f64(), numeric);
            report.coordinates_checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((pi, c));
            }
        }
    }
    Ok(report)
}
