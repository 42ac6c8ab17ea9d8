use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::ModelParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerParams {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// Optimizer moments. For Adam, `first` and `second` hold one tensor per
/// parameter in parameter order; SGD keeps none.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    /// Number of updates applied so far.
    pub t: u64,
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, params: &ModelParams) -> Self {
        let zeros = || {
            params
                .params
                .iter()
                .map(|p| Tensor::zeros(p.value.shape().to_vec()))
                .collect::<Vec<_>>()
        };
        match kind {
            OptimizerKind::Sgd => OptimizerState {
                kind,
                t: 0,
                first: Vec::new(),
                second: Vec::new(),
            },
            OptimizerKind::Adam => OptimizerState {
                kind,
                t: 0,
                first: zeros(),
                second: zeros(),
            },
        }
    }

    /// Applies one update. Parameters whose gradient is `None` are left
    /// untouched, moments included.
    pub fn step(&mut self, params: &mut ModelParams, grads: &[Option<Tensor>], hp: &OptimizerParams) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Contract(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        if hp.kind != self.kind {
            return Err(Error::Config("optimizer kind changed mid-training".into()));
        }
        self.t += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                let lr = hp.lr as f32;
                for (p, g) in params.params.iter_mut().zip(grads) {
                    let Some(g) = g else { continue };
                    for (w, &gi) in p.value.data_mut().iter_mut().zip(g.data()) {
                        *w -= lr * gi;
                    }
                }
            }
            OptimizerKind::Adam => {
                let t = self.t as i32;
                let c1 = 1.0 - hp.beta1.powi(t);
                let c2 = 1.0 - hp.beta2.powi(t);
                for (i, (p, g)) in params.params.iter_mut().zip(grads).enumerate() {
                    let Some(g) = g else { continue };
                    let m = self.first[i].data_mut();
                    let v = self.second[i].data_mut();
                    for (j, (w, &gi)) in p.value.data_mut().iter_mut().zip(g.data()).enumerate() {
                        let gi = gi as f64;
                        let mj = hp.beta1 * m[j] as f64 + (1.0 - hp.beta1) * gi;
                        let vj = hp.beta2 * v[j] as f64 + (1.0 - hp.beta2) * gi * gi;
                        m[j] = mj as f32;
                        v[j] = vj as f32;
                        let update = hp.lr * (mj / c1) / ((vj / c2).sqrt() + hp.eps);
                        *w = (*w as f64 - update) as f32;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Option<Tensor>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .flat_map(|g| g.data())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = (max_norm / norm) as f32;
        for g in grads.iter_mut().flatten() {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
    }
    norm
}
