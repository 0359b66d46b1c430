//! Pre-LN toy transformer classifier with observer sites.
//!
//! ```text
//! x[m,S,in] → embed → +pos → block × depth → ln_f → mean-pool → head → logits[m,k]
//! block:  h += proj(attn(qkv(ln1(h))))
//!         h += fc2(gelu(fc1(ln2(h))))
//! ```
//!
//! Every linear and LayerNorm layer exposes its input and output as an
//! observer site. Activation tensors are 2-D with `m·S` rows (or `m` rows
//! after pooling), so per-sample blocks are contiguous row groups.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::error::{QtError, Result};
use crate::outlier::{ObserverSite, SiteKind};
use crate::quant::{fake_quant, scale_from_range, QuantSpec};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyTransformerConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub seq_len: usize,
    pub input_dim: usize,
    pub num_classes: usize,
    pub seed: u64,
}

impl Default for ToyTransformerConfig {
    fn default() -> Self {
        ToyTransformerConfig {
            depth: 3,
            dim: 64,
            heads: 4,
            mlp_ratio: 4,
            seq_len: 16,
            input_dim: 16,
            num_classes: 10,
            seed: 0,
        }
    }
}

impl ToyTransformerConfig {
    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("depth", self.depth),
            ("dim", self.dim),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
            ("seq_len", self.seq_len),
            ("input_dim", self.input_dim),
            ("num_classes", self.num_classes),
        ];
        if let Some((name, _)) = extents.iter().find(|(_, v)| *v == 0) {
            return Err(QtError::config(format!("model {name} must be positive")));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(QtError::config(format!(
                "dim {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.num_classes < 2 {
            return Err(QtError::config("need at least two classes"));
        }
        Ok(())
    }

    pub fn hidden(&self) -> usize {
        self.dim * self.mlp_ratio
    }

    /// Linear layer names in forward order.
    pub fn linear_layers(&self) -> Vec<String> {
        let mut out = vec!["embed".to_string()];
        for i in 0..self.depth {
            for l in ["qkv", "proj", "fc1", "fc2"] {
                out.push(format!("blocks.{i}.{l}"));
            }
        }
        out.push("head".into());
        out
    }

    /// LayerNorm layer names in forward order.
    pub fn layer_norms(&self) -> Vec<String> {
        let mut out = Vec::new();
        for i in 0..self.depth {
            out.push(format!("blocks.{i}.ln1"));
            out.push(format!("blocks.{i}.ln2"));
        }
        out.push("ln_f".into());
        out
    }

    /// Observer sites in the order the forward pass reaches them.
    pub fn sites(&self) -> Vec<ObserverSite> {
        let mut layers: Vec<(String, bool, Option<usize>)> = vec![("embed".into(), false, None)];
        for i in 0..self.depth {
            for (l, ln) in [("ln1", true), ("qkv", false), ("proj", false), ("ln2", true), ("fc1", false), ("fc2", false)] {
                layers.push((format!("blocks.{i}.{l}"), ln, Some(i)));
            }
        }
        layers.push(("ln_f".into(), true, None));
        layers.push(("head".into(), false, None));
        let mut out = Vec::with_capacity(layers.len() * 2);
        for (layer, ln, block) in layers {
            let (ki, ko) = if ln {
                (SiteKind::LayerNormInput, SiteKind::LayerNormOutput)
            } else {
                (SiteKind::LinearInput, SiteKind::LinearOutput)
            };
            for (suffix, kind) in [("input", ki), ("output", ko)] {
                out.push(ObserverSite {
                    site_id: format!("{layer}.{suffix}"),
                    kind,
                    block_index: block,
                    layer: layer.clone(),
                });
            }
        }
        out
    }

    pub fn site_ids(&self) -> Vec<String> {
        self.sites().into_iter().map(|s| s.site_id).collect()
    }

    /// The closed set of weight names with their shapes, in initialization order.
    pub fn weight_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, h) = (self.dim, self.hidden());
        let mut out = vec![
            ("embed.weight".to_string(), vec![self.input_dim, d]),
            ("embed.bias".into(), vec![d]),
            ("pos".into(), vec![self.seq_len, d]),
        ];
        for i in 0..self.depth {
            let p = format!("blocks.{i}");
            out.extend([
                (format!("{p}.ln1.gamma"), vec![d]),
                (format!("{p}.ln1.beta"), vec![d]),
                (format!("{p}.qkv.weight"), vec![d, 3 * d]),
                (format!("{p}.qkv.bias"), vec![3 * d]),
                (format!("{p}.proj.weight"), vec![d, d]),
                (format!("{p}.proj.bias"), vec![d]),
                (format!("{p}.ln2.gamma"), vec![d]),
                (format!("{p}.ln2.beta"), vec![d]),
                (format!("{p}.fc1.weight"), vec![d, h]),
                (format!("{p}.fc1.bias"), vec![h]),
                (format!("{p}.fc2.weight"), vec![h, d]),
                (format!("{p}.fc2.bias"), vec![d]),
            ]);
        }
        out.extend([
            ("ln_f.gamma".to_string(), vec![d]),
            ("ln_f.beta".into(), vec![d]),
            ("head.weight".into(), vec![d, self.num_classes]),
            ("head.bias".into(), vec![self.num_classes]),
        ]);
        out
    }

    /// Weights that get fake-quantized: the linear-layer matrices.
    pub fn quantized_weight_names(&self) -> Vec<String> {
        self.linear_layers().into_iter().map(|l| format!("{l}.weight")).collect()
    }
}

/// Whether a tensor produced during the forward pass went through fake quantization.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TraceEvent {
    pub tensor: String,
    pub quantized: bool,
}

pub struct ForwardOutput {
    pub logits: Var,
    /// Site activations (before that site's fake quantization), in site order.
    pub sites: Vec<Var>,
    pub params: BTreeMap<String, Var>,
    pub trace: Vec<TraceEvent>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyTransformer {
    config: ToyTransformerConfig,
    weights: BTreeMap<String, Tensor>,
}

struct Ctx<'a> {
    tape: &'a mut Tape,
    params: BTreeMap<String, Var>,
    specs: Option<&'a BTreeMap<String, QuantSpec>>,
    sites: Vec<Var>,
    trace: Vec<TraceEvent>,
}

impl Ctx<'_> {
    fn p(&self, name: &str) -> Var {
        self.params[name]
    }

    fn observe(&mut self, site: String, v: Var) -> Var {
        self.sites.push(v);
        match self.specs.and_then(|s| s.get(&site)) {
            Some(spec) => {
                self.trace.push(TraceEvent { tensor: site, quantized: true });
                self.tape.fake_quant(v, spec)
            }
            None => {
                self.trace.push(TraceEvent { tensor: site, quantized: false });
                v
            }
        }
    }

    fn internal(&mut self, tensor: String) {
        self.trace.push(TraceEvent { tensor, quantized: false });
    }

    fn linear(&mut self, layer: &str, x: Var) -> Result<Var> {
        let x = self.observe(format!("{layer}.input"), x);
        let w = self.p(&format!("{layer}.weight"));
        let b = self.p(&format!("{layer}.bias"));
        let y = self.tape.matmul(x, w)?;
        let y = self.tape.add_tiled(y, b)?;
        Ok(self.observe(format!("{layer}.output"), y))
    }

    fn layer_norm(&mut self, layer: &str, x: Var) -> Result<Var> {
        let x = self.observe(format!("{layer}.input"), x);
        let g = self.p(&format!("{layer}.gamma"));
        let b = self.p(&format!("{layer}.beta"));
        self.internal(format!("{layer}.normalize"));
        let y = self.tape.layer_norm(x, g, b, LN_EPS)?;
        Ok(self.observe(format!("{layer}.output"), y))
    }
}

impl ToyTransformer {
    /// Fresh model: Gaussian(0, 0.02) matrices and positions, zero biases,
    /// identity LayerNorm affine.
    pub fn new(config: ToyTransformerConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut weights = BTreeMap::new();
        for (name, shape) in config.weight_shapes() {
            let n: usize = shape.iter().product();
            let data = if name.ends_with(".gamma") {
                vec![1.0; n]
            } else if name.ends_with(".bias") || name.ends_with(".beta") {
                vec![0.0; n]
            } else {
                (0..n).map(|_| rng.sample(normal)).collect()
            };
            weights.insert(name, Tensor::from_parts(shape, data));
        }
        Ok(ToyTransformer { config, weights })
    }

    /// Model from explicit weights; names and shapes must match the config exactly.
    pub fn from_weights(config: ToyTransformerConfig, weights: BTreeMap<String, Tensor>) -> Result<Self> {
        config.validate()?;
        let expected = config.weight_shapes();
        for (name, shape) in &expected {
            let t = weights
                .get(name)
                .ok_or_else(|| QtError::config(format!("missing weight `{name}`")))?;
            if t.shape() != shape.as_slice() {
                return Err(QtError::dim(format!(
                    "weight `{name}` has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        if weights.len() != expected.len() {
            let unknown = weights
                .keys()
                .find(|k| !expected.iter().any(|(n, _)| n == *k))
                .cloned()
                .unwrap_or_default();
            return Err(QtError::config(format!("unknown weight `{unknown}`")));
        }
        Ok(ToyTransformer { config, weights })
    }

    pub fn config(&self) -> &ToyTransformerConfig {
        &self.config
    }

    pub fn weights(&self) -> &BTreeMap<String, Tensor> {
        &self.weights
    }

    pub(crate) fn weights_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.weights
    }

    pub fn weight(&self, name: &str) -> Option<&Tensor> {
        self.weights.get(name)
    }

    pub fn sites(&self) -> Vec<ObserverSite> {
        self.config.sites()
    }

    pub fn num_params(&self) -> usize {
        self.weights.values().map(Tensor::len).sum()
    }

    /// Record the forward pass on `tape`. Weights become trainable leaves when
    /// `trainable`; `act_specs`, when given, must hold a spec for every site.
    pub fn forward(
        &self,
        tape: &mut Tape,
        batch: &Tensor,
        trainable: bool,
        act_specs: Option<&BTreeMap<String, QuantSpec>>,
    ) -> Result<ForwardOutput> {
        let c = &self.config;
        let [m, s, d_in] = batch.shape() else {
            return Err(QtError::dim(format!("batch must be 3-D, got {:?}", batch.shape())));
        };
        let m = *m;
        if *s != c.seq_len || *d_in != c.input_dim {
            return Err(QtError::dim(format!(
                "batch {:?} does not match seq_len {} × input_dim {}",
                batch.shape(),
                c.seq_len,
                c.input_dim
            )));
        }
        if let Some(specs) = act_specs {
            check_site_specs(c, specs)?;
        }
        let mut params = BTreeMap::new();
        for (name, t) in &self.weights {
            let v = if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) };
            params.insert(name.clone(), v);
        }
        let mut cx = Ctx {
            tape,
            params,
            specs: act_specs,
            sites: Vec::new(),
            trace: Vec::new(),
        };
        let x = cx.tape.constant(batch.reshape(&[m * c.seq_len, c.input_dim])?);
        let h = cx.linear("embed", x)?;
        let pos = cx.p("pos");
        let mut h = cx.tape.add_tiled(h, pos)?;
        for i in 0..c.depth {
            let b = format!("blocks.{i}");
            let a = cx.layer_norm(&format!("{b}.ln1"), h)?;
            let qkv = cx.linear(&format!("{b}.qkv"), a)?;
            cx.internal(format!("{b}.attn.softmax"));
            let ctx = cx.tape.attention(qkv, m, c.seq_len, c.heads)?;
            let o = cx.linear(&format!("{b}.proj"), ctx)?;
            h = cx.tape.add(h, o)?;
            let a = cx.layer_norm(&format!("{b}.ln2"), h)?;
            let f = cx.linear(&format!("{b}.fc1"), a)?;
            let g = cx.tape.gelu(f);
            let f = cx.linear(&format!("{b}.fc2"), g)?;
            h = cx.tape.add(h, f)?;
        }
        let z = cx.layer_norm("ln_f", h)?;
        let pooled = cx.tape.mean_pool(z, m)?;
        let logits = cx.linear("head", pooled)?;
        Ok(ForwardOutput {
            logits,
            sites: cx.sites,
            params: cx.params,
            trace: cx.trace,
        })
    }

    /// Logits `[m × k]` without recording gradients.
    pub fn predict(&self, batch: &Tensor, act_specs: Option<&BTreeMap<String, QuantSpec>>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, batch, false, act_specs)?;
        Ok(tape.value(out.logits).clone())
    }

    /// Logits plus every site activation, in site order.
    pub fn capture(
        &self,
        batch: &Tensor,
        act_specs: Option<&BTreeMap<String, QuantSpec>>,
    ) -> Result<(Tensor, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, batch, false, act_specs)?;
        let sites = out.sites.iter().map(|&v| tape.value(v).clone()).collect();
        Ok((tape.value(out.logits).clone(), sites))
    }

    /// Plant channel outliers in the value projection of every block.
    ///
    /// In each block, `max(1, ⌈fraction·dim⌉)` randomly chosen value channels
    /// have their `qkv` weight column and bias scaled by `magnitude`; the
    /// matching rows of `proj.weight` are divided by it. Attention mixes
    /// value rows linearly, so the block output is unchanged up to rounding.
    pub fn inject_outliers(&self, magnitude: f64, fraction: f64, seed: u64) -> Result<(ToyTransformer, Injection)> {
        if !(magnitude.is_finite() && magnitude >= 1.0) {
            return Err(QtError::domain(format!("outlier magnitude {magnitude} must be at least 1")));
        }
        if !(fraction > 0.0 && fraction <= 0.05) {
            return Err(QtError::domain(format!("outlier fraction {fraction} outside (0, 0.05]")));
        }
        let d = self.config.dim;
        let count = ((fraction * d as f64).ceil() as usize).clamp(1, d);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = self.clone();
        let mut channels = BTreeMap::new();
        for i in 0..self.config.depth {
            let chosen = rand::seq::index::sample(&mut rng, d, count).into_vec();
            let b = format!("blocks.{i}");
            for &c in &chosen {
                let col = 2 * d + c;
                let w = out.weights.get_mut(&format!("{b}.qkv.weight")).expect("qkv weight");
                for r in 0..d {
                    w.data_mut()[r * 3 * d + col] *= magnitude;
                }
                out.weights.get_mut(&format!("{b}.qkv.bias")).expect("qkv bias").data_mut()[col] *= magnitude;
                let p = out.weights.get_mut(&format!("{b}.proj.weight")).expect("proj weight");
                for v in &mut p.data_mut()[c * d..(c + 1) * d] {
                    *v /= magnitude;
                }
            }
            channels.insert(i, chosen);
        }
        Ok((
            out,
            Injection {
                magnitude,
                fraction,
                channels,
            },
        ))
    }

    /// Min-max weight specs at `bits` for every quantized weight.
    pub fn minmax_weight_specs(&self, bits: u8) -> Result<BTreeMap<String, QuantSpec>> {
        let mut out = BTreeMap::new();
        for name in self.config.quantized_weight_names() {
            let r = self.weights[&name].max_abs()?;
            let spec = scale_from_range(r, bits).or_else(|e| {
                // all-zero matrix: any positive scale leaves it unchanged
                if r == 0.0 { QuantSpec::new(bits, 1.0) } else { Err(e) }
            })?;
            out.insert(name, spec);
        }
        Ok(out)
    }
}

fn check_site_specs(c: &ToyTransformerConfig, specs: &BTreeMap<String, QuantSpec>) -> Result<()> {
    let ids = c.site_ids();
    if let Some(missing) = ids.iter().find(|id| !specs.contains_key(*id)) {
        return Err(QtError::config(format!("no activation spec for site `{missing}`")));
    }
    if let Some(extra) = specs.keys().find(|k| !ids.contains(k)) {
        return Err(QtError::config(format!("activation spec for unknown site `{extra}`")));
    }
    Ok(())
}

/// Which value channels [`ToyTransformer::inject_outliers`] scaled, per block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Injection {
    pub magnitude: f64,
    pub fraction: f64,
    pub channels: BTreeMap<usize, Vec<usize>>,
}

/// Per-tensor specs for a whole-model quantization.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct QuantPlan {
    pub weights: BTreeMap<String, QuantSpec>,
    pub activations: BTreeMap<String, QuantSpec>,
}

/// A model whose linear weights are fake-quantized, evaluated with activation
/// fake quantization at every observer site.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel {
    model: ToyTransformer,
    plan: QuantPlan,
}

impl QuantizedModel {
    pub fn model(&self) -> &ToyTransformer {
        &self.model
    }

    pub fn plan(&self) -> &QuantPlan {
        &self.plan
    }

    pub fn forward(&self, tape: &mut Tape, batch: &Tensor) -> Result<ForwardOutput> {
        self.model.forward(tape, batch, false, Some(&self.plan.activations))
    }

    pub fn predict(&self, batch: &Tensor) -> Result<Tensor> {
        self.model.predict(batch, Some(&self.plan.activations))
    }

    pub fn capture(&self, batch: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        self.model.capture(batch, Some(&self.plan.activations))
    }
}

/// Fake-quantize every linear weight matrix and attach activation specs.
/// Biases, positions and LayerNorm parameters stay in full precision.
pub fn quantize_model(model: &ToyTransformer, plan: &QuantPlan) -> Result<QuantizedModel> {
    let names = model.config.quantized_weight_names();
    if let Some(missing) = names.iter().find(|n| !plan.weights.contains_key(*n)) {
        return Err(QtError::config(format!("no quant spec for weight `{missing}`")));
    }
    if let Some(extra) = plan.weights.keys().find(|k| !names.contains(k)) {
        return Err(QtError::config(format!("quant spec for unknown or excluded weight `{extra}`")));
    }
    check_site_specs(&model.config, &plan.activations)?;
    let mut q = model.clone();
    for (name, spec) in &plan.weights {
        let w = q.weights.get_mut(name).expect("checked above");
        *w = fake_quant(w, spec);
    }
    Ok(QuantizedModel {
        model: q,
        plan: plan.clone(),
    })
}

/// Index of the largest logit in each row (first wins on ties).
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = *logits.shape().last().expect("non-empty shape");
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
