//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends a node whose parents already live on the tape, so
//! the node order is a topological order and `backward` is one reverse sweep.
//! The composite layers of the toy transformer (layer norm, multi-head
//! attention, cross-entropy, the outlier term) are single nodes with
//! hand-written adjoints.

use crate::error::{QtError, Result};
use crate::kernels;
use crate::quant::QuantSpec;
use crate::stats::{self, AbsQuantile, Moments};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
struct TermCache {
    argmax: usize,
    median: AbsQuantile,
    mean: f64,
    std: f64,
    max: f64,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddTiled(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    Attention {
        qkv: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    MeanPool {
        x: Var,
        groups: usize,
    },
    FakeQuant {
        x: Var,
        clip: f64,
    },
    Sum(Var),
    Mean(Var),
    SumN(Vec<Var>),
    MaxAbs {
        x: Var,
        index: usize,
    },
    MedianAbs {
        x: Var,
        q: AbsQuantile,
    },
    Std {
        x: Var,
        mean: f64,
        std: f64,
    },
    OutlierTerms {
        x: Var,
        groups: usize,
        cache: Vec<TermCache>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<f64>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation. Confined to one execution context.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    non_finite: Option<(usize, &'static str)>,
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(QtError::dim(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

/// Forward value and cache of one outlier term `(max|a| - median|a|) / σ(a)`.
fn outlier_term(a: &[f64]) -> Option<(f64, TermCache)> {
    let (argmax, max) = stats::argmax_abs(a)?;
    let median = stats::abs_quantile(a, 0.5)?;
    let m = Moments::from_slice(a);
    let std = m.std();
    if std <= 0.0 || a.len() < 2 {
        return None;
    }
    let cache = TermCache {
        argmax,
        median,
        mean: m.mean,
        std,
        max,
    };
    Some(((max - median.value) / std, cache))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool, name: &'static str) -> Var {
        if cfg!(debug_assertions) && self.non_finite.is_none() && !value.all_finite() {
            self.non_finite = Some((self.nodes.len(), name));
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Trainable leaf; receives a gradient on `backward`.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true, "param")
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false, "constant")
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.node(v).value
    }

    /// Gradient of the last `backward` loss with respect to `v`, if it was reached.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads
            .get(v.0)
            .and_then(|g| g.as_ref())
            .map(|g| Tensor::from_parts(self.node(v).value.shape().to_vec(), g.clone()))
    }

    /// `a[m×k] · b[k×n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(QtError::dim(format!(
                "matmul inner dimensions differ: {m}×{k} · {k2}×{n}"
            )));
        }
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), ng, "matmul"))
    }

    /// `x[r×c] + tile(b)`: `b` holds `t×c` values and is repeated down the rows
    /// (row `i` adds row `i mod t` of `b`). Covers bias vectors (`t = 1`) and
    /// positional tables.
    pub fn add_tiled(&mut self, x: Var, b: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        let bl = self.value(b).len();
        if !bl.is_multiple_of(c) || r % (bl / c) != 0 {
            return Err(QtError::dim(format!(
                "cannot tile {:?} over {r}×{c}",
                self.value(b).shape()
            )));
        }
        let bd = self.value(b).data();
        let out: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bd[i % bl])
            .collect();
        let ng = self.ng(&[x, b]);
        Ok(self.push(Tensor::from_parts(vec![r, c], out), Op::AddTiled(x, b), ng, "add_tiled"))
    }

    fn zip(&mut self, a: Var, b: Var, what: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        same_shape(self.value(a), self.value(b), what)?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.value(a).shape().to_vec();
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::from_parts(shape, out), op, ng, what))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x);
        let out = Tensor::from_parts(v.shape().to_vec(), v.data().iter().map(|&e| e * c).collect());
        let ng = self.ng(&[x]);
        self.push(out, Op::Scale(x, c), ng, "scale")
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor::from_parts(v.shape().to_vec(), v.data().iter().map(|&e| gelu(e)).collect());
        let ng = self.ng(&[x]);
        self.push(out, Op::Gelu(x), ng, "gelu")
    }

    /// Layer normalization over the last axis of `x[r×c]` with affine `gamma`, `beta` of length `c`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(QtError::dim(format!("layer_norm affine params must have {c} values")));
        }
        let xd = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = vec![0.0; r * c];
        let mut means = Vec::with_capacity(r);
        let mut rstds = Vec::with_capacity(r);
        for i in 0..r {
            let row = &xd[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            for j in 0..c {
                out[i * c + j] = (row[j] - mean) * rstd * g[j] + b[j];
            }
            means.push(mean);
            rstds.push(rstd);
        }
        let ng = self.ng(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::from_parts(vec![r, c], out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean: means,
                rstd: rstds,
            },
            ng,
            "layer_norm",
        ))
    }

    /// Multi-head self-attention core. `qkv` is `[batch·seq × 3d]` holding the
    /// query, key and value projections side by side; returns the per-head
    /// context `[batch·seq × d]` (softmax kept in full precision).
    pub fn attention(&mut self, qkv: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let (r, c3) = self.value(qkv).dims2()?;
        if r != batch * seq || c3 % 3 != 0 || (c3 / 3) % heads != 0 {
            return Err(QtError::dim(format!(
                "attention input {r}×{c3} incompatible with batch {batch}, seq {seq}, heads {heads}"
            )));
        }
        let d = c3 / 3;
        let hd = d / heads;
        let inv = 1.0 / (hd as f64).sqrt();
        let x = self.value(qkv).data();
        let mut out = vec![0.0; r * d];
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut scores = vec![0.0; seq];
        for b in 0..batch {
            for h in 0..heads {
                let pbase = (b * heads + h) * seq * seq;
                for s in 0..seq {
                    let q = &x[(b * seq + s) * c3 + h * hd..][..hd];
                    let mut mx = f64::NEG_INFINITY;
                    for (t, sc) in scores.iter_mut().enumerate() {
                        let k = &x[(b * seq + t) * c3 + d + h * hd..][..hd];
                        *sc = kernels::dot(q, k) * inv;
                        mx = mx.max(*sc);
                    }
                    let mut z = 0.0;
                    for sc in scores.iter_mut() {
                        *sc = (*sc - mx).exp();
                        z += *sc;
                    }
                    let o = &mut out[(b * seq + s) * d + h * hd..][..hd];
                    for (t, sc) in scores.iter().enumerate() {
                        let p = sc / z;
                        probs[pbase + s * seq + t] = p;
                        let v = &x[(b * seq + t) * c3 + 2 * d + h * hd..][..hd];
                        for (oo, &vv) in o.iter_mut().zip(v) {
                            *oo += p * vv;
                        }
                    }
                }
            }
        }
        let ng = self.ng(&[qkv]);
        Ok(self.push(
            Tensor::from_parts(vec![r, d], out),
            Op::Attention {
                qkv,
                batch,
                seq,
                heads,
                probs,
            },
            ng,
            "attention",
        ))
    }

    /// Mean over consecutive row groups: `[g·s × c] -> [g × c]`.
    pub fn mean_pool(&mut self, x: Var, groups: usize) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        if groups == 0 || r % groups != 0 {
            return Err(QtError::dim(format!("{r} rows do not split into {groups} groups")));
        }
        let s = r / groups;
        let xd = self.value(x).data();
        let mut out = vec![0.0; groups * c];
        for g in 0..groups {
            for i in 0..s {
                let row = &xd[(g * s + i) * c..][..c];
                for (o, &v) in out[g * c..(g + 1) * c].iter_mut().zip(row) {
                    *o += v;
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= s as f64);
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::from_parts(vec![groups, c], out), Op::MeanPool { x, groups }, ng, "mean_pool"))
    }

    /// Fake quantization with a straight-through gradient inside the clip range.
    pub fn fake_quant(&mut self, x: Var, spec: &QuantSpec) -> Var {
        let out = crate::quant::fake_quant(self.value(x), spec);
        let ng = self.ng(&[x]);
        self.push(
            out,
            Op::FakeQuant {
                x,
                clip: spec.clip_bound(),
            },
            ng,
            "fake_quant",
        )
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), ng, "sum")
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), ng, "mean")
    }

    /// Elementwise sum of equally shaped values.
    pub fn sum_n(&mut self, vars: &[Var]) -> Result<Var> {
        let first = *vars.first().ok_or_else(|| QtError::domain("sum of no values"))?;
        let shape = self.value(first).shape().to_vec();
        let mut acc = vec![0.0; self.value(first).len()];
        for &v in vars {
            same_shape(self.value(first), self.value(v), "sum_n")?;
            for (a, &x) in acc.iter_mut().zip(self.value(v).data()) {
                *a += x;
            }
        }
        let ng = self.ng(vars);
        Ok(self.push(Tensor::from_parts(shape, acc), Op::SumN(vars.to_vec()), ng, "sum_n"))
    }

    /// `max |x|`; subgradient flows to the first maximizing element.
    pub fn max_abs(&mut self, x: Var) -> Result<Var> {
        let (index, m) = stats::argmax_abs(self.value(x).data())
            .ok_or_else(|| QtError::domain("max_abs of an empty tensor"))?;
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::scalar(m), Op::MaxAbs { x, index }, ng, "max_abs"))
    }

    /// `median |x|`; subgradient splits across the defining order statistics.
    pub fn median_abs(&mut self, x: Var) -> Result<Var> {
        let q = stats::abs_quantile(self.value(x).data(), 0.5)
            .ok_or_else(|| QtError::domain("median_abs of an empty tensor"))?;
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::scalar(q.value), Op::MedianAbs { x, q }, ng, "median_abs"))
    }

    /// Population standard deviation of all elements.
    pub fn stddev(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.len() < 2 {
            return Err(QtError::domain("stddev needs at least two elements"));
        }
        let m = Moments::from_slice(v.data());
        let std = m.std();
        let ng = self.ng(&[x]);
        Ok(self.push(
            Tensor::scalar(std),
            Op::Std {
                x,
                mean: m.mean,
                std,
            },
            ng,
            "stddev",
        ))
    }

    /// Per-group outlier terms `(max|A| - median|A|) / σ(A)` where the rows of
    /// `x` split into `groups` equal consecutive blocks `A`. Returns `[groups]`.
    ///
    /// Fails with [`QtError::DegenerateActivation`] (empty site name) when a
    /// group has zero spread.
    pub fn outlier_terms(&mut self, x: Var, groups: usize) -> Result<Var> {
        let v = self.value(x);
        if groups == 0 || !v.shape()[0].is_multiple_of(groups) {
            return Err(QtError::dim(format!(
                "{} rows do not split into {groups} groups",
                v.shape()[0]
            )));
        }
        let per = v.len() / groups;
        if per < 2 {
            return Err(QtError::domain("outlier term needs at least two elements per sample"));
        }
        let mut terms = Vec::with_capacity(groups);
        let mut cache = Vec::with_capacity(groups);
        for chunk in v.data().chunks(per) {
            let (t, c) = outlier_term(chunk).ok_or(QtError::DegenerateActivation { site: String::new() })?;
            terms.push(t);
            cache.push(c);
        }
        let ng = self.ng(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![groups], terms),
            Op::OutlierTerms { x, groups, cache },
            ng,
            "outlier_terms",
        ))
    }

    /// Mean cross-entropy between `softmax(logits)` and `labels` (both `[m×k]`).
    pub fn cross_entropy(&mut self, logits: Var, labels: &Tensor) -> Result<Var> {
        let (m, k) = self.value(logits).dims2()?;
        if labels.shape() != [m, k] {
            return Err(QtError::dim(format!(
                "labels {:?} do not match logits {m}×{k}",
                labels.shape()
            )));
        }
        let z = self.value(logits).data();
        let y = labels.data();
        let mut probs = vec![0.0; m * k];
        let mut loss = 0.0;
        for i in 0..m {
            let row = &z[i * k..(i + 1) * k];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            let lse = mx + sum.ln();
            for j in 0..k {
                probs[i * k + j] = (row[j] - lse).exp();
                let yj = y[i * k + j];
                if yj != 0.0 {
                    loss -= yj * (row[j] - lse);
                }
            }
        }
        let ng = self.ng(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss / m as f64),
            Op::CrossEntropy {
                logits,
                labels: y.to_vec(),
                probs,
            },
            ng,
            "cross_entropy",
        ))
    }

    /// Populate gradients of the scalar `loss` with respect to every ancestor.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if let Some((idx, name)) = self.non_finite {
            return Err(QtError::data(format!(
                "non-finite value produced by `{name}` (node {idx})"
            )));
        }
        if !self.value(loss).is_scalar() {
            return Err(QtError::domain(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let Tape { nodes, grads, .. } = self;
        grads.clear();
        grads.resize(nodes.len(), None);
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if nodes[i].needs_grad {
                propagate(nodes, grads, i, &g);
            }
            grads[i] = Some(g);
        }
        Ok(())
    }
}

fn acc<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].needs_grad {
        return None;
    }
    let n = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
}

fn propagate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], i: usize, g: &[f64]) {
    let node = &nodes[i];
    let val = |v: Var| nodes[v.0].value.data();
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = nodes[a.0].value.dims2().expect("2-D");
            let n = node.value.shape()[1];
            if let Some(ga) = acc(nodes, grads, *a) {
                kernels::matmul_a_bt_acc(ga, g, val(*b), m, n, k);
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                kernels::matmul_at_b_acc(gb, val(*a), g, m, k, n);
            }
        }
        Op::AddTiled(x, b) => {
            if let Some(gx) = acc(nodes, grads, *x) {
                gx.iter_mut().zip(g).for_each(|(o, &v)| *o += v);
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                let bl = gb.len();
                for (j, &v) in g.iter().enumerate() {
                    gb[j % bl] += v;
                }
            }
        }
        Op::Add(a, b) => {
            for v in [a, b] {
                if let Some(gv) = acc(nodes, grads, *v) {
                    gv.iter_mut().zip(g).for_each(|(o, &e)| *o += e);
                }
            }
        }
        Op::Sub(a, b) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(o, &e)| *o += e);
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                gb.iter_mut().zip(g).for_each(|(o, &e)| *o -= e);
            }
        }
        Op::Mul(a, b) => {
            let (ad, bd) = (val(*a).to_vec(), val(*b).to_vec());
            if let Some(ga) = acc(nodes, grads, *a) {
                for j in 0..g.len() {
                    ga[j] += g[j] * bd[j];
                }
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                for j in 0..g.len() {
                    gb[j] += g[j] * ad[j];
                }
            }
        }
        Op::Div(a, b) => {
            let (ad, bd) = (val(*a).to_vec(), val(*b).to_vec());
            if let Some(ga) = acc(nodes, grads, *a) {
                for j in 0..g.len() {
                    ga[j] += g[j] / bd[j];
                }
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                for j in 0..g.len() {
                    gb[j] -= g[j] * ad[j] / (bd[j] * bd[j]);
                }
            }
        }
        Op::Scale(x, c) => {
            if let Some(gx) = acc(nodes, grads, *x) {
                gx.iter_mut().zip(g).for_each(|(o, &e)| *o += c * e);
            }
        }
        Op::Gelu(x) => {
            let xd = val(*x);
            if let Some(gx) = acc(nodes, grads, *x) {
                for j in 0..g.len() {
                    gx[j] += g[j] * gelu_grad(xd[j]);
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            mean,
            rstd,
        } => {
            let xd = val(*x);
            let gd = val(*gamma).to_vec();
            let c = gd.len();
            let r = mean.len();
            let xhat = |i: usize, j: usize| (xd[i * c + j] - mean[i]) * rstd[i];
            if let Some(gg) = acc(nodes, grads, *gamma) {
                for i in 0..r {
                    for j in 0..c {
                        gg[j] += g[i * c + j] * xhat(i, j);
                    }
                }
            }
            if let Some(gb) = acc(nodes, grads, *beta) {
                for i in 0..r {
                    for j in 0..c {
                        gb[j] += g[i * c + j];
                    }
                }
            }
            if let Some(gx) = acc(nodes, grads, *x) {
                for i in 0..r {
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for j in 0..c {
                        let dxh = g[i * c + j] * gd[j];
                        s1 += dxh;
                        s2 += dxh * xhat(i, j);
                    }
                    s1 /= c as f64;
                    s2 /= c as f64;
                    for j in 0..c {
                        let dxh = g[i * c + j] * gd[j];
                        gx[i * c + j] += rstd[i] * (dxh - s1 - xhat(i, j) * s2);
                    }
                }
            }
        }
        Op::Attention {
            qkv,
            batch,
            seq,
            heads,
            probs,
        } => {
            let x = val(*qkv);
            let Some(gx) = acc(nodes, grads, *qkv) else { return };
            let (batch, seq, heads) = (*batch, *seq, *heads);
            let c3 = x.len() / (batch * seq);
            let d = c3 / 3;
            let hd = d / heads;
            let inv = 1.0 / (hd as f64).sqrt();
            let mut dp = vec![0.0; seq];
            for b in 0..batch {
                for h in 0..heads {
                    let pbase = (b * heads + h) * seq * seq;
                    for s in 0..seq {
                        let go = &g[(b * seq + s) * d + h * hd..][..hd];
                        let prow = &probs[pbase + s * seq..][..seq];
                        // dV and dP
                        let mut dot_pdp = 0.0;
                        for t in 0..seq {
                            let vbase = (b * seq + t) * c3 + 2 * d + h * hd;
                            let mut acc_dp = 0.0;
                            for e in 0..hd {
                                gx[vbase + e] += prow[t] * go[e];
                                acc_dp += go[e] * x[vbase + e];
                            }
                            dp[t] = acc_dp;
                            dot_pdp += prow[t] * acc_dp;
                        }
                        // dS -> dQ, dK
                        let qbase = (b * seq + s) * c3 + h * hd;
                        for t in 0..seq {
                            let ds = prow[t] * (dp[t] - dot_pdp) * inv;
                            if ds == 0.0 {
                                continue;
                            }
                            let kbase = (b * seq + t) * c3 + d + h * hd;
                            for e in 0..hd {
                                gx[qbase + e] += ds * x[kbase + e];
                                gx[kbase + e] += ds * x[qbase + e];
                            }
                        }
                    }
                }
            }
        }
        Op::MeanPool { x, groups } => {
            if let Some(gx) = acc(nodes, grads, *x) {
                let c = g.len() / groups;
                let s = gx.len() / (groups * c);
                for gi in 0..*groups {
                    for i in 0..s {
                        for j in 0..c {
                            gx[(gi * s + i) * c + j] += g[gi * c + j] / s as f64;
                        }
                    }
                }
            }
        }
        Op::FakeQuant { x, clip } => {
            let xd = val(*x);
            if let Some(gx) = acc(nodes, grads, *x) {
                for j in 0..g.len() {
                    if xd[j].abs() <= *clip {
                        gx[j] += g[j];
                    }
                }
            }
        }
        Op::Sum(x) => {
            if let Some(gx) = acc(nodes, grads, *x) {
                gx.iter_mut().for_each(|o| *o += g[0]);
            }
        }
        Op::Mean(x) => {
            if let Some(gx) = acc(nodes, grads, *x) {
                let n = gx.len() as f64;
                gx.iter_mut().for_each(|o| *o += g[0] / n);
            }
        }
        Op::SumN(vars) => {
            for v in vars {
                if let Some(gv) = acc(nodes, grads, *v) {
                    gv.iter_mut().zip(g).for_each(|(o, &e)| *o += e);
                }
            }
        }
        Op::MaxAbs { x, index } => {
            let s = sign(val(*x)[*index]);
            if let Some(gx) = acc(nodes, grads, *x) {
                gx[*index] += g[0] * s;
            }
        }
        Op::MedianAbs { x, q } => {
            let xd = val(*x);
            let (slo, shi) = (sign(xd[q.lo]), sign(xd[q.hi]));
            if let Some(gx) = acc(nodes, grads, *x) {
                gx[q.lo] += g[0] * (1.0 - q.frac) * slo;
                gx[q.hi] += g[0] * q.frac * shi;
            }
        }
        Op::Std { x, mean, std } => {
            if *std <= 0.0 {
                return;
            }
            let xd = val(*x);
            if let Some(gx) = acc(nodes, grads, *x) {
                let n = xd.len() as f64;
                for j in 0..xd.len() {
                    gx[j] += g[0] * (xd[j] - mean) / (n * std);
                }
            }
        }
        Op::OutlierTerms { x, groups, cache } => {
            let xd = val(*x);
            let per = xd.len() / groups;
            if let Some(gx) = acc(nodes, grads, *x) {
                for (gi, c) in cache.iter().enumerate() {
                    let base = gi * per;
                    let a = &xd[base..base + per];
                    let gt = g[gi];
                    if gt == 0.0 {
                        continue;
                    }
                    let num = c.max - c.median.value;
                    let inv_s = 1.0 / c.std;
                    // numerator: max and median order statistics
                    gx[base + c.argmax] += gt * inv_s * sign(a[c.argmax]);
                    gx[base + c.median.lo] -= gt * inv_s * (1.0 - c.median.frac) * sign(a[c.median.lo]);
                    gx[base + c.median.hi] -= gt * inv_s * c.median.frac * sign(a[c.median.hi]);
                    // denominator: d sigma / d a_j = (a_j - mean) / (n sigma)
                    let coef = -gt * num * inv_s * inv_s / (per as f64 * c.std);
                    for (j, &aj) in a.iter().enumerate() {
                        gx[base + j] += coef * (aj - c.mean);
                    }
                }
            }
        }
        Op::CrossEntropy {
            logits,
            labels,
            probs,
        } => {
            if let Some(gl) = acc(nodes, grads, *logits) {
                let (m, k) = nodes[logits.0].value.dims2().expect("2-D");
                for i in 0..m {
                    let ysum: f64 = labels[i * k..(i + 1) * k].iter().sum();
                    for j in 0..k {
                        gl[i * k + j] += g[0] * (probs[i * k + j] * ysum - labels[i * k + j]) / m as f64;
                    }
                }
            }
        }
    }
}

/// The outlier term of a single activation tensor, `None` if it has zero spread.
pub fn outlier_term_value(a: &[f64]) -> Option<f64> {
    outlier_term(a).map(|(t, _)| t)
}
