//! Token embedding + post-norm transformer encoder (feature extractor), a
//! per-token NER head, and a per-sequence domain head that sits behind a
//! gradient-reversal node.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tape, Tensor, Var};
use crate::data::Batch;
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub n_tags: usize,
    pub dropout: f64,
    pub grl_lambda: f64,
    /// Linear ramp of the reversal strength from 0 to `grl_lambda` over this
    /// many steps; 0 keeps it constant.
    pub grl_warmup_steps: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 2,
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            d_ff: 128,
            max_len: 128,
            n_tags: 1,
            dropout: 0.1,
            grl_lambda: 1.0,
            grl_warmup_steps: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_layers", self.n_layers),
            ("d_ff", self.d_ff),
            ("max_len", self.max_len),
            ("n_tags", self.n_tags),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "model.d_model ({}) must be divisible by model.n_heads ({})",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("model.dropout must lie in [0, 1), got {}", self.dropout)));
        }
        if !(self.grl_lambda >= 0.0) || !self.grl_lambda.is_finite() {
            return Err(Error::Config(format!(
                "model.grl_lambda must be non-negative, got {}",
                self.grl_lambda
            )));
        }
        Ok(())
    }

    /// Reversal strength at optimizer step `step` (0-based).
    pub fn lambda_at(&self, step: usize) -> f64 {
        if self.grl_warmup_steps == 0 {
            self.grl_lambda
        } else {
            self.grl_lambda * ((step + 1) as f64 / self.grl_warmup_steps as f64).min(1.0)
        }
    }
}

/// The three disjoint trainable groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    /// Embeddings and encoder blocks.
    #[serde(rename = "theta_f")]
    FeatureExtractor,
    #[serde(rename = "theta_n")]
    NerHead,
    #[serde(rename = "theta_d")]
    DomainHead,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T = f32> {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T = f32> {
    pub params: Vec<Param<T>>,
}

const PER_LAYER: usize = 16;

/// Fixed positions of each tensor in [`ModelParams::params`].
mod slot {
    pub const TOK_EMB: usize = 0;
    pub const LAYERS: usize = 1;
    // Within a layer block.
    pub const WQ: usize = 0;
    pub const BQ: usize = 1;
    pub const WK: usize = 2;
    pub const BK: usize = 3;
    pub const WV: usize = 4;
    pub const BV: usize = 5;
    pub const WO: usize = 6;
    pub const BO: usize = 7;
    pub const LN1_G: usize = 8;
    pub const LN1_B: usize = 9;
    pub const W1: usize = 10;
    pub const B1: usize = 11;
    pub const W2: usize = 12;
    pub const B2: usize = 13;
    pub const LN2_G: usize = 14;
    pub const LN2_B: usize = 15;
}

#[derive(Clone, Copy)]
enum Init {
    Embedding,
    Linear { fan_in: usize },
    Zeros,
    Ones,
}

fn layout(cfg: &ModelConfig) -> Vec<(String, ParamGroup, Vec<usize>, Init)> {
    use ParamGroup::*;
    let (d, ff) = (cfg.d_model, cfg.d_ff);
    let mut out = vec![("embed.tokens".to_string(), FeatureExtractor, vec![cfg.vocab_size, d], Init::Embedding)];
    for l in 0..cfg.n_layers {
        let p = |n: &str| format!("encoder.{l}.{n}");
        let lin = |fan_in| Init::Linear { fan_in };
        out.extend([
            (p("attn.wq"), FeatureExtractor, vec![d, d], lin(d)),
            (p("attn.bq"), FeatureExtractor, vec![d], Init::Zeros),
            (p("attn.wk"), FeatureExtractor, vec![d, d], lin(d)),
            (p("attn.bk"), FeatureExtractor, vec![d], Init::Zeros),
            (p("attn.wv"), FeatureExtractor, vec![d, d], lin(d)),
            (p("attn.bv"), FeatureExtractor, vec![d], Init::Zeros),
            (p("attn.wo"), FeatureExtractor, vec![d, d], lin(d)),
            (p("attn.bo"), FeatureExtractor, vec![d], Init::Zeros),
            (p("ln1.gamma"), FeatureExtractor, vec![d], Init::Ones),
            (p("ln1.beta"), FeatureExtractor, vec![d], Init::Zeros),
            (p("ffn.w1"), FeatureExtractor, vec![d, ff], lin(d)),
            (p("ffn.b1"), FeatureExtractor, vec![ff], Init::Zeros),
            (p("ffn.w2"), FeatureExtractor, vec![ff, d], lin(ff)),
            (p("ffn.b2"), FeatureExtractor, vec![d], Init::Zeros),
            (p("ln2.gamma"), FeatureExtractor, vec![d], Init::Ones),
            (p("ln2.beta"), FeatureExtractor, vec![d], Init::Zeros),
        ]);
    }
    out.extend([
        ("ner.w".to_string(), NerHead, vec![d, cfg.n_tags], Init::Linear { fan_in: d }),
        ("ner.b".to_string(), NerHead, vec![cfg.n_tags], Init::Zeros),
        ("domain.w1".to_string(), DomainHead, vec![d, d], Init::Linear { fan_in: d }),
        ("domain.b1".to_string(), DomainHead, vec![d], Init::Zeros),
        ("domain.w2".to_string(), DomainHead, vec![d, 2], Init::Linear { fan_in: d }),
        ("domain.b2".to_string(), DomainHead, vec![2], Init::Zeros),
    ]);
    out
}

/// Names, groups and shapes of every trainable tensor, in storage order.
pub fn param_specs(cfg: &ModelConfig) -> Vec<(String, ParamGroup, Vec<usize>)> {
    layout(cfg).into_iter().map(|(n, g, s, _)| (n, g, s)).collect()
}

/// Deterministic initialisation: linear weights uniform in ±1/√fan_in,
/// biases and layer-norm shifts zero, layer-norm scales one, token
/// embeddings N(0, 0.02).
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ModelParams> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f32, 0.02).expect("valid normal");
    let params = layout(cfg)
        .into_iter()
        .map(|(name, group, shape, init)| {
            let n: usize = shape.iter().product();
            let data: Vec<f32> = match init {
                Init::Embedding => (0..n).map(|_| normal.sample(&mut rng)).collect(),
                Init::Linear { fan_in } => {
                    let bound = 1.0 / (fan_in as f32).sqrt();
                    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                }
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
            };
            Ok(Param {
                name,
                group,
                value: Tensor::new(data, shape)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ModelParams { params })
}

impl<T: Real> ModelParams<T> {
    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn group_indices(&self, group: ParamGroup) -> impl Iterator<Item = usize> + '_ {
        self.params
            .iter()
            .enumerate()
            .filter(move |(_, p)| p.group == group)
            .map(|(i, _)| i)
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    group: p.group,
                    value: p.value.cast(),
                })
                .collect(),
        }
    }

    /// Checks that names, groups and shapes match the layout for `cfg`.
    pub fn check_layout(&self, cfg: &ModelConfig) -> Result<()> {
        let specs = param_specs(cfg);
        if specs.len() != self.params.len() {
            return Err(Error::Integrity(format!(
                "expected {} parameter tensors, found {}",
                specs.len(),
                self.params.len()
            )));
        }
        for ((name, group, shape), p) in specs.iter().zip(&self.params) {
            if &p.name != name || p.group != *group || p.value.shape() != shape.as_slice() {
                return Err(Error::Integrity(format!(
                    "parameter {} ({:?}, {:?}) does not match expected {name} ({group:?}, {shape:?})",
                    p.name,
                    p.group,
                    p.value.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Sinusoidal position table `[max_len × d_model]`; not trainable.
pub fn positional_encoding(len: usize, d_model: usize) -> Vec<f64> {
    let mut pe = vec![0.0; len * d_model];
    for pos in 0..len {
        for i in 0..d_model {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d_model as f64);
            let angle = pos as f64 * rate;
            pe[pos * d_model + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}

pub(crate) fn mix(a: u64, b: u64) -> u64 {
    // splitmix64 finaliser over the combined words
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Head-splitting index maps for a `[B·L × d]` activation.
struct HeadMaps {
    split: Rc<Vec<usize>>,
    merge: Rc<Vec<usize>>,
}

fn head_maps(batch: usize, len: usize, heads: usize, d: usize) -> HeadMaps {
    let dh = d / heads;
    let n = batch * len * d;
    let mut split = vec![0; n];
    let mut merge = vec![0; n];
    for b in 0..batch {
        for h in 0..heads {
            for l in 0..len {
                for e in 0..dh {
                    let headed = ((b * heads + h) * len + l) * dh + e;
                    let flat = (b * len + l) * d + h * dh + e;
                    split[headed] = flat;
                    merge[flat] = headed;
                }
            }
        }
    }
    HeadMaps {
        split: Rc::new(split),
        merge: Rc::new(merge),
    }
}

/// A model forward pass under construction on its own tape.
pub struct Graph<'c, T: Real = f32> {
    pub tape: Tape<T>,
    config: &'c ModelConfig,
    vars: Vec<Var>,
    dropout_seed: Option<u64>,
}

impl<'c, T: Real> Graph<'c, T> {
    /// Registers every parameter on a fresh tape. With `dropout_seed` set,
    /// dropout is active and every dropout site derives its mask from it.
    pub fn new(config: &'c ModelConfig, params: &ModelParams<T>, dropout_seed: Option<u64>) -> Result<Self> {
        let mut tape = Tape::new();
        let vars = params
            .params
            .iter()
            .map(|p| tape.param(p.value.clone()))
            .collect::<Result<Vec<_>>>()?;
        if vars.len() != layout(config).len() {
            return Err(Error::Contract("parameter set does not match the model config".into()));
        }
        Ok(Graph {
            tape,
            config,
            vars,
            dropout_seed,
        })
    }

    pub fn param_var(&self, index: usize) -> Var {
        self.vars[index]
    }

    pub fn param_vars(&self) -> &[Var] {
        &self.vars
    }

    fn layer(&self, l: usize, which: usize) -> Var {
        self.vars[slot::LAYERS + l * PER_LAYER + which]
    }

    fn head(&self, offset: usize) -> Var {
        self.vars[slot::LAYERS + self.config.n_layers * PER_LAYER + offset]
    }

    fn dropout(&mut self, x: Var, stream: u64, site: u64) -> Result<Var> {
        match self.dropout_seed {
            Some(seed) if self.config.dropout > 0.0 => {
                let s = mix(mix(seed, stream), site);
                self.tape.dropout(x, self.config.dropout, s)
            }
            _ => Ok(x),
        }
    }

    fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let h = self.tape.matmul(x, w)?;
        self.tape.add_bias(h, b)
    }

    /// Feature extractor: `[B × L × d_model]` features for `batch`. `stream`
    /// separates the dropout masks of different batches in one step.
    pub fn encode(&mut self, batch: &Batch, stream: u64) -> Result<Var> {
        let cfg = self.config;
        let (rows, len, d, heads) = (batch.rows(), batch.seq_len, cfg.d_model, cfg.n_heads);
        if len > cfg.max_len {
            return Err(Error::Data(format!("batch length {len} exceeds max_len {}", cfg.max_len)));
        }
        for r in 0..rows {
            if let Some(&bad) = batch.row_tokens(r).iter().find(|&&id| id >= cfg.vocab_size) {
                return Err(Error::Data(format!(
                    "token id {bad} in sequence {} (batch row {r}) exceeds vocabulary size {}",
                    batch.indices.get(r).copied().unwrap_or(r),
                    cfg.vocab_size
                )));
            }
        }

        let emb = self.tape.embedding(self.vars[slot::TOK_EMB], &batch.tokens)?;
        let emb = self.tape.scale(emb, T::from_f64((d as f64).sqrt()))?;
        let pe_row = positional_encoding(len, d);
        let pe: Vec<f64> = (0..rows).flat_map(|_| pe_row.iter().copied()).collect();
        let pe = self.tape.constant(Tensor::from_f64(&pe, vec![rows * len, d])?)?;
        let x = self.tape.add(emb, pe)?;
        let mut x = self.dropout(x, stream, 0)?;

        let maps = head_maps(rows, len, heads, d);
        let dh = d / heads;
        let headed = [rows * heads, len, dh];
        let inv_sqrt = T::from_f64(1.0 / (dh as f64).sqrt());
        for l in 0..cfg.n_layers {
            let q = self.linear(x, self.layer(l, slot::WQ), self.layer(l, slot::BQ))?;
            let k = self.linear(x, self.layer(l, slot::WK), self.layer(l, slot::BK))?;
            let v = self.linear(x, self.layer(l, slot::WV), self.layer(l, slot::BV))?;
            let q = self.tape.gather(q, maps.split.clone(), &headed)?;
            let k = self.tape.gather(k, maps.split.clone(), &headed)?;
            let v = self.tape.gather(v, maps.split.clone(), &headed)?;
            let scores = self.tape.batch_matmul(q, k, true)?;
            let scores = self.tape.scale(scores, inv_sqrt)?;
            let attn = self.tape.masked_softmax(scores, &batch.mask, heads)?;
            let ctx = self.tape.batch_matmul(attn, v, false)?;
            let ctx = self.tape.gather(ctx, maps.merge.clone(), &[rows * len, d])?;
            let o = self.linear(ctx, self.layer(l, slot::WO), self.layer(l, slot::BO))?;
            let o = self.dropout(o, stream, 1 + 2 * l as u64)?;
            let h = self.tape.add(x, o)?;
            let h = self
                .tape
                .layer_norm(h, self.layer(l, slot::LN1_G), self.layer(l, slot::LN1_B), LN_EPS)?;

            let f = self.linear(h, self.layer(l, slot::W1), self.layer(l, slot::B1))?;
            let f = self.tape.gelu(f)?;
            let f = self.linear(f, self.layer(l, slot::W2), self.layer(l, slot::B2))?;
            let f = self.dropout(f, stream, 2 + 2 * l as u64)?;
            let h2 = self.tape.add(h, f)?;
            x = self
                .tape
                .layer_norm(h2, self.layer(l, slot::LN2_G), self.layer(l, slot::LN2_B), LN_EPS)?;
        }
        self.tape.reshape(x, &[rows, len, d])
    }

    /// `[B × L × n_tags]` unnormalised tag scores.
    pub fn ner_logits(&mut self, features: Var) -> Result<Var> {
        let s = self.tape.shape(features).to_vec();
        if s.len() != 3 || s[2] != self.config.d_model {
            return Err(Error::Dimension {
                op: "ner_logits",
                lhs: s,
                rhs: vec![self.config.d_model],
            });
        }
        let flat = self.tape.reshape(features, &[s[0] * s[1], s[2]])?;
        let logits = self.linear(flat, self.head(0), self.head(1))?;
        self.tape.reshape(logits, &[s[0], s[1], self.config.n_tags])
    }

    /// `[B × 2]` domain scores (class 0 source, class 1 target) from the
    /// mask-aware mean of `features`, passed through gradient reversal.
    pub fn domain_logits(&mut self, features: Var, mask: &[bool], lambda: f64) -> Result<Var> {
        let pooled = self.tape.masked_mean_pool(features, mask)?;
        let reversed = self.tape.gradient_reversal(pooled, lambda)?;
        self.domain_head(reversed)
    }

    /// The discriminator MLP alone on `[B × d_model]` sequence vectors, with
    /// no reversal in front of it.
    pub fn domain_head(&mut self, pooled: Var) -> Result<Var> {
        let h = self.linear(pooled, self.head(2), self.head(3))?;
        let h = self.tape.tanh(h)?;
        self.linear(h, self.head(4), self.head(5))
    }
}
