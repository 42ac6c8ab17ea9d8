//! Reverse-mode tape.
//!
//! Every op appends a node holding its forward value and enough saved state
//! to run its backward rule. `backward` walks the nodes in reverse insertion
//! order, which is a valid reverse topological order because an op can only
//! reference nodes that already exist.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Gelu(Var),
    Tanh(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    MaskedSoftmax {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Reshape(Var),
    Gather {
        x: Var,
        index: Rc<Vec<usize>>,
    },
    MaskedMeanPool {
        x: Var,
        weights: Vec<T>,
    },
    GradReversal {
        x: Var,
        lambda: T,
    },
    Dropout {
        x: Var,
        keep: Vec<T>,
    },
    Nll {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<T>,
        denom: T,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T = f32> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `var`, or zeros of `shape` when nothing reached it.
    pub fn get_or_zeros(&self, var: Var, shape: &[usize]) -> Tensor<T> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(shape.to_vec()))
    }
}

#[derive(Debug, Default)]
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Dimension {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu<T: Real>(x: T) -> T {
    let x = x.to_f64();
    let u = GELU_C * (x + GELU_A * x * x * x);
    T::from_f64(0.5 * x * (1.0 + u.tanh()))
}

fn gelu_grad<T: Real>(x: T) -> T {
    let x = x.to_f64();
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    T::from_f64(0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::Numerical(format!(
                "non-finite value produced by {name} (node {})",
                self.nodes.len()
            )));
        }
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn leaf(&mut self, value: Tensor<T>, trainable: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::Numerical("non-finite leaf value".into()));
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: trainable,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Registers a trainable leaf whose gradient is reported by `backward`.
    pub fn param(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, true)
    }

    /// Registers a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::ZERO; m * n];
        T::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            k as isize,
            1,
            self.value(b).data(),
            n as isize,
            1,
            &mut out,
            false,
        );
        let value = Tensor::from_parts(out, vec![m, n]);
        self.push("matmul", value, Op::MatMul(a, b), &[a, b])
    }

    /// Batched product over the leading axis: `a[B×m×k] · b[B×k×n]`, or
    /// `a · bᵀ` with `b[B×n×k]` when `trans_b` is set.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let ok = sa.len() == 3
            && sb.len() == 3
            && sa[0] == sb[0]
            && if trans_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return Err(shape_err("batch_matmul", sa, sb));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
        let mut out = vec![T::ZERO; batch * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            T::gemm(
                m,
                k,
                n,
                &da[i * m * k..(i + 1) * m * k],
                k as isize,
                1,
                &db[i * k * n..(i + 1) * k * n],
                rsb,
                csb,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let value = Tensor::from_parts(out, vec![batch, m, n]);
        self.push("batch_matmul", value, Op::BatchMatMul { a, b, trans_b }, &[a, b])
    }

    fn zip_same(&self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err(op, va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_parts(data, va.shape().to_vec()))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("add", a, b, |x, y| x + y)?;
        self.push("add", value, Op::Add(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("mul", a, b, |x, y| x * y)?;
        self.push("mul", value, Op::Mul(a, b), &[a, b])
    }

    /// Adds a rank-1 `bias` along the last axis of `x`. The only broadcast the
    /// engine supports.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sb.len() != 1 || sx.last() != Some(&sb[0]) {
            return Err(shape_err("add_bias", sx, sb));
        }
        let d = sb[0];
        let b = self.value(bias).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(d) {
            for (v, &bb) in row.iter_mut().zip(&b) {
                *v += bb;
            }
        }
        let value = Tensor::from_parts(data, sx.to_vec());
        self.push("add_bias", value, Op::AddBias(x, bias), &[x, bias])
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let vx = self.value(x);
        let data = vx.data().iter().map(|&v| v * c).collect();
        let value = Tensor::from_parts(data, vx.shape().to_vec());
        self.push("scale", value, Op::Scale(x, c), &[x])
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).data().iter().map(|v| v.to_f64()).sum();
        self.push("sum", Tensor::scalar(T::from_f64(s)), Op::Sum(x), &[x])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let data = vx.data().iter().map(|&v| gelu(v)).collect();
        let value = Tensor::from_parts(data, vx.shape().to_vec());
        self.push("gelu", value, Op::Gelu(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let data = vx.data().iter().map(|&v| v.tanh()).collect();
        let value = Tensor::from_parts(data, vx.shape().to_vec());
        self.push("tanh", value, Op::Tanh(x), &[x])
    }

    /// Softmax along `axis`, stabilised by subtracting the per-lane max.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let vx = self.value(x);
        let shape = vx.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::Contract(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = vx.data();
        let mut out = vec![T::ZERO; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * n * inner + j * inner + i;
                let max = (0..n).map(|j| src[at(j)].to_f64()).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..n {
                    let e = (src[at(j)].to_f64() - max).exp();
                    out[at(j)] = T::from_f64(e);
                    total += e;
                }
                for j in 0..n {
                    out[at(j)] = T::from_f64(out[at(j)].to_f64() / total);
                }
            }
        }
        let value = Tensor::from_parts(out, shape);
        self.push("softmax", value, Op::Softmax { x, axis }, &[x])
    }

    /// Softmax over the last axis of attention scores `x[(B·H)×m×n]` where
    /// key positions with `key_mask[b·n + j] == false` receive probability
    /// exactly zero. Every row must keep at least one key.
    pub fn masked_softmax(&mut self, x: Var, key_mask: &[bool], heads: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 || heads == 0 || !shape[0].is_multiple_of(heads) || key_mask.len() != (shape[0] / heads) * shape[2] {
            return Err(shape_err("masked_softmax", &shape, &[key_mask.len(), heads]));
        }
        let (groups, m, n) = (shape[0], shape[1], shape[2]);
        let src = self.value(x).data();
        let mut out = vec![T::ZERO; src.len()];
        for g in 0..groups {
            let mask = &key_mask[(g / heads) * n..(g / heads + 1) * n];
            if !mask.iter().any(|&k| k) {
                return Err(Error::Contract("attention row with every key masked".into()));
            }
            for r in 0..m {
                let base = (g * m + r) * n;
                let row = &src[base..base + n];
                let max = row
                    .iter()
                    .zip(mask)
                    .filter(|(_, &k)| k)
                    .map(|(v, _)| v.to_f64())
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..n {
                    if mask[j] {
                        let e = (row[j].to_f64() - max).exp();
                        out[base + j] = T::from_f64(e);
                        total += e;
                    }
                }
                for j in 0..n {
                    if mask[j] {
                        out[base + j] = T::from_f64(out[base + j].to_f64() / total);
                    }
                }
            }
        }
        let value = Tensor::from_parts(out, shape);
        self.push("masked_softmax", value, Op::MaskedSoftmax { x }, &[x])
    }

    /// Layer normalisation over the last axis followed by `gamma·x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().unwrap_or(&0);
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(shape_err("layer_norm", &sx, self.shape(gamma)));
        }
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = src.len() / d;
        let mut xhat = vec![T::ZERO; src.len()];
        let mut inv_std = vec![T::ZERO; rows];
        let mut out = vec![T::ZERO; src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().map(|v| v.to_f64()).sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v.to_f64() - mean).powi(2)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = T::from_f64(inv);
            for j in 0..d {
                let h = (row[j].to_f64() - mean) * inv;
                xhat[r * d + j] = T::from_f64(h);
                out[r * d + j] = T::from_f64(g[j].to_f64() * h + b[j].to_f64());
            }
        }
        let value = Tensor::from_parts(out, sx);
        self.push(
            "layer_norm",
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    /// Row lookup: `table[V×d]` indexed by `ids` gives `[ids.len()×d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 {
            return Err(shape_err("embedding", &st, &[ids.len()]));
        }
        let (v, d) = (st[0], st[1]);
        if let Some(pos) = ids.iter().position(|&i| i >= v) {
            return Err(Error::Data(format!(
                "token id {} at flat position {pos} exceeds vocabulary size {v}",
                ids[pos]
            )));
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let value = Tensor::from_parts(out, vec![ids.len(), d]);
        self.push(
            "embedding",
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        if shape.iter().product::<usize>() != vx.len() {
            return Err(shape_err("reshape", vx.shape(), shape));
        }
        let value = Tensor::from_parts(vx.data().to_vec(), shape.to_vec());
        self.push("reshape", value, Op::Reshape(x), &[x])
    }

    /// `out[i] = x[index[i]]`; `index` must be a permutation-like map into `x`.
    /// Backward scatters (with accumulation) through the same map.
    pub fn gather(&mut self, x: Var, index: Rc<Vec<usize>>, shape: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        if shape.iter().product::<usize>() != index.len() || index.iter().any(|&i| i >= vx.len()) {
            return Err(shape_err("gather", vx.shape(), shape));
        }
        let src = vx.data();
        let data = index.iter().map(|&i| src[i]).collect();
        let value = Tensor::from_parts(data, shape.to_vec());
        self.push("gather", value, Op::Gather { x, index }, &[x])
    }

    /// Mean over the real positions of `x[B×L×d]`; `mask` is `[B×L]`.
    pub fn masked_mean_pool(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 || mask.len() != sx[0] * sx[1] {
            return Err(shape_err("masked_mean_pool", &sx, &[mask.len()]));
        }
        let (b, l, d) = (sx[0], sx[1], sx[2]);
        let mut weights = vec![T::ZERO; b * l];
        for r in 0..b {
            let count = mask[r * l..(r + 1) * l].iter().filter(|&&m| m).count();
            if count == 0 {
                return Err(Error::Contract(format!("sequence {r} has no real positions")));
            }
            for p in 0..l {
                if mask[r * l + p] {
                    weights[r * l + p] = T::from_f64(1.0 / count as f64);
                }
            }
        }
        let src = self.value(x).data();
        let mut out = vec![T::ZERO; b * d];
        for r in 0..b {
            for j in 0..d {
                let mut acc = 0.0f64;
                for p in 0..l {
                    let w = weights[r * l + p];
                    if w != T::ZERO {
                        acc += w.to_f64() * src[(r * l + p) * d + j].to_f64();
                    }
                }
                out[r * d + j] = T::from_f64(acc);
            }
        }
        let value = Tensor::from_parts(out, vec![b, d]);
        self.push("masked_mean_pool", value, Op::MaskedMeanPool { x, weights }, &[x])
    }

    /// Identity in the forward pass; multiplies the upstream gradient by
    /// `-lambda` in the backward pass.
    pub fn gradient_reversal(&mut self, x: Var, lambda: f64) -> Result<Var> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::Config(format!(
                "gradient reversal lambda must be a finite non-negative number, got {lambda}"
            )));
        }
        let value = self.value(x).clone();
        self.push(
            "gradient_reversal",
            value,
            Op::GradReversal {
                x,
                lambda: T::from_f64(lambda),
            },
            &[x],
        )
    }

    /// Inverted dropout with its own seed, so a step can be replayed exactly.
    pub fn dropout(&mut self, x: Var, p: f64, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {p} outside [0, 1)")));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = T::from_f64(1.0 / (1.0 - p));
        let vx = self.value(x);
        let keep: Vec<T> = (0..vx.len())
            .map(|_| if rng.random::<f64>() >= p { scale } else { T::ZERO })
            .collect();
        let data = vx.data().iter().zip(&keep).map(|(&v, &k)| v * k).collect();
        let value = Tensor::from_parts(data, vx.shape().to_vec());
        self.push("dropout", value, Op::Dropout { x, keep }, &[x])
    }

    /// `Σ_rows −log softmax(logits[r])[target[r]] / denom` over rows whose
    /// target is `Some`, with log-softmax fused.
    pub fn nll(&mut self, logits: Var, targets: &[Option<usize>], denom: f64) -> Result<Var> {
        let sl = self.shape(logits).to_vec();
        if sl.len() != 2 || sl[0] != targets.len() {
            return Err(shape_err("nll", &sl, &[targets.len()]));
        }
        if !(denom > 0.0) {
            return Err(Error::Contract(format!("nll denominator must be positive, got {denom}")));
        }
        let c = sl[1];
        let src = self.value(logits).data();
        let mut probs = vec![T::ZERO; src.len()];
        let mut total = 0.0f64;
        for (r, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            if t >= c {
                return Err(Error::Data(format!("target class {t} at row {r} exceeds {c} classes")));
            }
            let row = &src[r * c..(r + 1) * c];
            let max = row.iter().map(|v| v.to_f64()).fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v.to_f64() - max).exp()).sum::<f64>().ln();
            for j in 0..c {
                probs[r * c + j] = T::from_f64((row[j].to_f64() - lse).exp());
            }
            total += lse - row[t].to_f64();
        }
        let value = Tensor::scalar(T::from_f64(total / denom));
        self.push(
            "nll",
            value,
            Op::Nll {
                logits,
                targets: targets.to_vec(),
                probs,
                denom: T::from_f64(denom),
            },
            &[logits],
        )
    }

    /// Reverse pass from a one-element `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let root_value = self.value(root);
        if root_value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar root, got shape {:?}",
                root_value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![T::ONE]);

        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let (lower, upper) = grads.split_at_mut(i);
            let Some(g) = upper[0].as_deref() else { continue };
            self.backward_node(i, g, lower);
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| {
                g.filter(|_| node.needs_grad)
                    .map(|g| Tensor::from_parts(g, node.value.shape().to_vec()))
            })
            .collect();
        Ok(Gradients { grads })
    }

    /// Gradient buffer of a parent, allocated on first use. `None` when the
    /// parent does not lead to any trainable leaf.
    fn slot<'g>(&self, lower: &'g mut [Option<Vec<T>>], p: Var) -> Option<&'g mut [T]> {
        let node = &self.nodes[p.0];
        if !node.needs_grad {
            return None;
        }
        Some(lower[p.0].get_or_insert_with(|| vec![T::ZERO; node.value.len()]))
    }

    fn backward_node(&self, i: usize, g: &[T], lower: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.slot(lower, *a) {
                    // dA = g · Bᵀ
                    T::gemm(m, n, k, g, n as isize, 1, vb, 1, n as isize, ga, true);
                }
                if let Some(gb) = self.slot(lower, *b) {
                    // dB = Aᵀ · g
                    T::gemm(k, m, n, va, 1, k as isize, g, n as isize, 1, gb, true);
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (batch, m, k) = (sa[0], sa[1], sa[2]);
                let n = if *trans_b { sb[1] } else { sb[2] };
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.slot(lower, *a) {
                    for t in 0..batch {
                        let gt = &g[t * m * n..(t + 1) * m * n];
                        let bt = &vb[t * k * n..(t + 1) * k * n];
                        let out = &mut ga[t * m * k..(t + 1) * m * k];
                        if *trans_b {
                            // out = a·bᵀ, b[n×k]: dA = g · b
                            T::gemm(m, n, k, gt, n as isize, 1, bt, k as isize, 1, out, true);
                        } else {
                            // b[k×n]: dA = g · bᵀ
                            T::gemm(m, n, k, gt, n as isize, 1, bt, 1, n as isize, out, true);
                        }
                    }
                }
                if let Some(gb) = self.slot(lower, *b) {
                    for t in 0..batch {
                        let gt = &g[t * m * n..(t + 1) * m * n];
                        let at = &va[t * m * k..(t + 1) * m * k];
                        let out = &mut gb[t * k * n..(t + 1) * k * n];
                        if *trans_b {
                            // dB[n×k] = gᵀ · a
                            T::gemm(n, m, k, gt, 1, n as isize, at, k as isize, 1, out, true);
                        } else {
                            // dB[k×n] = aᵀ · g
                            T::gemm(k, m, n, at, 1, k as isize, gt, n as isize, 1, out, true);
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for p in [a, b] {
                    if let Some(gp) = self.slot(lower, *p) {
                        axpy(gp, g, T::ONE);
                    }
                }
            }
            Op::AddBias(x, bias) => {
                if let Some(gx) = self.slot(lower, *x) {
                    axpy(gx, g, T::ONE);
                }
                if let Some(gb) = self.slot(lower, *bias) {
                    let d = gb.len();
                    for row in g.chunks(d) {
                        axpy(gb, row, T::ONE);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.slot(lower, *a) {
                    for ((o, &gi), &bi) in ga.iter_mut().zip(g).zip(vb) {
                        *o += gi * bi;
                    }
                }
                if let Some(gb) = self.slot(lower, *b) {
                    for ((o, &gi), &ai) in gb.iter_mut().zip(g).zip(va) {
                        *o += gi * ai;
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(gx) = self.slot(lower, *x) {
                    axpy(gx, g, *c);
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.slot(lower, *x) {
                    for o in gx.iter_mut() {
                        *o += g[0];
                    }
                }
            }
            Op::Gelu(x) => {
                let vx = self.value(*x).data();
                if let Some(gx) = self.slot(lower, *x) {
                    for ((o, &gi), &xi) in gx.iter_mut().zip(g).zip(vx) {
                        *o += gi * gelu_grad(xi);
                    }
                }
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                if let Some(gx) = self.slot(lower, *x) {
                    for ((o, &gi), &yi) in gx.iter_mut().zip(g).zip(y) {
                        *o += gi * (T::ONE - yi * yi);
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, n, inner) = split_axis(node.value.shape(), *axis);
                if let Some(gx) = self.slot(lower, *x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * n * inner + j * inner + i;
                            let dot: f64 = (0..n).map(|j| g[at(j)].to_f64() * y[at(j)].to_f64()).sum();
                            for j in 0..n {
                                let k = at(j);
                                gx[k] += T::from_f64(y[k].to_f64() * (g[k].to_f64() - dot));
                            }
                        }
                    }
                }
            }
            Op::MaskedSoftmax { x } => {
                let y = node.value.data();
                let n = *node.value.shape().last().unwrap();
                if let Some(gx) = self.slot(lower, *x) {
                    for ((yr, gr), or) in y.chunks(n).zip(g.chunks(n)).zip(gx.chunks_mut(n)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a.to_f64() * b.to_f64()).sum();
                        for j in 0..n {
                            or[j] += T::from_f64(yr[j].to_f64() * (gr[j].to_f64() - dot));
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = self.shape(*gamma)[0];
                let gv = self.value(*gamma).data();
                if let Some(gx) = self.slot(lower, *x) {
                    for (r, inv) in inv_std.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut mean_dh = 0.0f64;
                        let mut mean_dh_h = 0.0f64;
                        for j in 0..d {
                            let dh = gr[j].to_f64() * gv[j].to_f64();
                            mean_dh += dh;
                            mean_dh_h += dh * hr[j].to_f64();
                        }
                        mean_dh /= d as f64;
                        mean_dh_h /= d as f64;
                        let inv = inv.to_f64();
                        for j in 0..d {
                            let dh = gr[j].to_f64() * gv[j].to_f64();
                            gx[r * d + j] += T::from_f64(inv * (dh - mean_dh - hr[j].to_f64() * mean_dh_h));
                        }
                    }
                }
                if let Some(gg) = self.slot(lower, *gamma) {
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                }
                if let Some(gb) = self.slot(lower, *beta) {
                    for gr in g.chunks(d) {
                        axpy(gb, gr, T::ONE);
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = self.shape(*table)[1];
                if let Some(gt) = self.slot(lower, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        axpy(&mut gt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d], T::ONE);
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = self.slot(lower, *x) {
                    axpy(gx, g, T::ONE);
                }
            }
            Op::Gather { x, index } => {
                if let Some(gx) = self.slot(lower, *x) {
                    for (&src, &gi) in index.iter().zip(g) {
                        gx[src] += gi;
                    }
                }
            }
            Op::MaskedMeanPool { x, weights } => {
                let sx = self.shape(*x);
                let (b, l, d) = (sx[0], sx[1], sx[2]);
                if let Some(gx) = self.slot(lower, *x) {
                    for r in 0..b {
                        for p in 0..l {
                            let w = weights[r * l + p];
                            if w == T::ZERO {
                                continue;
                            }
                            let dst = &mut gx[(r * l + p) * d..(r * l + p + 1) * d];
                            axpy(dst, &g[r * d..(r + 1) * d], w);
                        }
                    }
                }
            }
            Op::GradReversal { x, lambda } => {
                if let Some(gx) = self.slot(lower, *x) {
                    axpy(gx, g, -*lambda);
                }
            }
            Op::Dropout { x, keep } => {
                if let Some(gx) = self.slot(lower, *x) {
                    for ((o, &gi), &k) in gx.iter_mut().zip(g).zip(keep) {
                        *o += gi * k;
                    }
                }
            }
            Op::Nll {
                logits,
                targets,
                probs,
                denom,
            } => {
                let c = self.shape(*logits)[1];
                let scale = g[0] / *denom;
                if let Some(gl) = self.slot(lower, *logits) {
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        for j in 0..c {
                            let onehot = if j == t { T::ONE } else { T::ZERO };
                            gl[r * c + j] += scale * (probs[r * c + j] - onehot);
                        }
                    }
                }
            }
        }
    }
}

fn axpy<T: Real>(dst: &mut [T], src: &[T], alpha: T) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

/// (product of dims before `axis`, size of `axis`, product of dims after).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
