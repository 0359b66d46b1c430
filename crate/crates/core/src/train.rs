//! Fine-tuning with the blended task/outlier objective, and evaluation.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{decompose, ErrorDecomposition};
use crate::checkpoint::{ModelCheckpoint, TrainingMetadata};
use crate::data::{one_hot, Dataset};
use crate::error::{QtError, Result};
use crate::model::{argmax_rows, quantize_model, QuantPlan, ToyTransformer};
use crate::outlier::{classification_loss, outlier_loss_by_site, site_metric, step_alpha, total_loss, OutlierLossConfig, SiteSelection};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Samples per forward pass during evaluation.
pub const EVAL_CHUNK: usize = 250;
/// Samples whose site activations feed the error decompositions.
pub const ANALYSIS_SAMPLES: usize = 250;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerConfig,
    pub outlier: OutlierLossConfig,
    pub seed: u64,
    /// Evaluate on the held-out split every this many steps (0 = never).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 300,
            batch_size: 32,
            learning_rate: 1e-3,
            optimizer: OptimizerConfig::default(),
            outlier: OutlierLossConfig::disabled(),
            seed: 0,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(QtError::config("batch_size must be positive"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(QtError::config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        match self.optimizer {
            OptimizerConfig::Sgd { momentum } if !(0.0..1.0).contains(&momentum) => {
                return Err(QtError::config(format!("momentum {momentum} outside [0, 1)")));
            }
            OptimizerConfig::Adam { beta1, beta2, eps }
                if !((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0) =>
            {
                return Err(QtError::config("Adam needs betas in [0, 1) and eps > 0"));
            }
            _ => {}
        }
        self.outlier.validate()
    }
}

/// First-order optimizer state keyed by weight name.
#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    lr: f64,
    t: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, lr: f64) -> Self {
        Optimizer {
            config,
            lr,
            t: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Apply one update. Weights without an entry in `grads` get a zero gradient.
    pub fn step(&mut self, weights: &mut BTreeMap<String, Tensor>, grads: &BTreeMap<String, Tensor>) {
        self.t += 1;
        let lr = self.lr;
        for (name, w) in weights.iter_mut() {
            let g = grads.get(name).map(Tensor::data);
            let n = w.len();
            let grad = |i: usize| g.map_or(0.0, |g| g[i]);
            match self.config {
                OptimizerConfig::Sgd { momentum } => {
                    let vel = self.first.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
                    for (i, (wv, v)) in w.data_mut().iter_mut().zip(vel.iter_mut()).enumerate() {
                        *v = momentum * *v + grad(i);
                        *wv -= lr * *v;
                    }
                }
                OptimizerConfig::Adam { beta1, beta2, eps } => {
                    let m = self.first.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
                    let v = self.second.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
                    let c1 = 1.0 - beta1.powf(self.t as f64);
                    let c2 = 1.0 - beta2.powf(self.t as f64);
                    for i in 0..n {
                        let gi = grad(i);
                        m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                        v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                        let mh = m[i] / c1;
                        let vh = v[i] / c2;
                        w.data_mut()[i] -= lr * mh / (vh.sqrt() + eps);
                    }
                }
            }
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRecord {
    pub step: usize,
    pub alpha: f64,
    pub cls_loss: f64,
    pub out_loss: f64,
    pub total_loss: f64,
    pub mean_site_metric: f64,
    pub site_metrics: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub records: Vec<TrainRecord>,
}

impl TrainLog {
    pub fn to_ndjson(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r).expect("record serializes"));
            s.push('\n');
        }
        s
    }
}

/// Parse newline-delimited records; blank lines are skipped.
pub fn parse_train_log(bytes: &[u8]) -> Result<TrainLog> {
    let text = std::str::from_utf8(bytes).map_err(|e| QtError::data(format!("log is not UTF-8: {e}")))?;
    let mut records = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let r: TrainRecord = serde_json::from_str(line)?;
        if !(r.cls_loss.is_finite() && r.out_loss.is_finite() && r.total_loss.is_finite()) {
            return Err(QtError::data(format!("non-finite loss at step {}", r.step)));
        }
        records.push(r);
    }
    Ok(TrainLog { records })
}

/// Losses at one step, before the update.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLosses {
    pub alpha: f64,
    pub cls: f64,
    pub out: f64,
    pub total: f64,
    pub site_metrics: BTreeMap<String, f64>,
}

/// Sample indices drawn for `step`: a fixed function of `(seed, step)`.
pub fn batch_indices(n: usize, batch_size: usize, seed: u64, step: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64);
    rand::seq::index::sample(&mut rng, n, batch_size.min(n)).into_vec()
}

struct Recorded {
    tape: Tape,
    total: Var,
    params: BTreeMap<String, Var>,
    losses: StepLosses,
}

fn selected_sites(model: &ToyTransformer, sel: &SiteSelection) -> Result<Vec<usize>> {
    let ids = model.config().site_ids();
    if let SiteSelection::Only(list) = sel {
        if let Some(bad) = list.iter().find(|s| !ids.contains(s)) {
            return Err(QtError::config(format!("unknown observer site `{bad}`")));
        }
    }
    let idx: Vec<usize> = (0..ids.len()).filter(|&i| sel.includes(&ids[i])).collect();
    if idx.is_empty() {
        return Err(QtError::config("outlier loss selects no observer sites"));
    }
    Ok(idx)
}

fn record_step(model: &ToyTransformer, data: &Dataset, config: &TrainConfig, step: usize) -> Result<Recorded> {
    let idx = batch_indices(data.len(), config.batch_size, config.seed, step);
    let (x, y) = data.batch(&idx)?;
    let labels = one_hot(&y, model.config().num_classes);
    let sel = selected_sites(model, &config.outlier.sites)?;
    let ids = model.config().site_ids();
    let mut tape = Tape::new();
    let fwd = model.forward(&mut tape, &x, true, None)?;
    let cls = classification_loss(&mut tape, fwd.logits, &labels)?;
    let acts: Vec<(&str, Var)> = sel.iter().map(|&i| (ids[i].as_str(), fwd.sites[i])).collect();
    let (out, means) = outlier_loss_by_site(&mut tape, &acts, idx.len())?;
    let alpha = step_alpha(&config.outlier, step);
    let total = total_loss(&mut tape, cls, out, alpha)?;
    let losses = StepLosses {
        alpha,
        cls: tape.value(cls).item(),
        out: tape.value(out).item(),
        total: tape.value(total).item(),
        site_metrics: acts.iter().map(|(id, _)| id.to_string()).zip(means).collect(),
    };
    Ok(Recorded {
        tape,
        total,
        params: fwd.params,
        losses,
    })
}

/// Losses the training loop records at `step` for the given weights.
pub fn loss_at_step(model: &ToyTransformer, data: &Dataset, config: &TrainConfig, step: usize) -> Result<StepLosses> {
    config.validate()?;
    Ok(record_step(model, data, config, step)?.losses)
}

#[derive(Debug, Clone)]
pub struct FinetuneOutput {
    pub checkpoint: ModelCheckpoint,
    pub log: TrainLog,
}

/// Run `config.steps` optimizer steps on the blended objective.
///
/// A non-finite loss or gradient aborts with [`QtError::Diverged`] carrying
/// the weights from before the failing step.
pub fn finetune(
    model: &ToyTransformer,
    train: &Dataset,
    eval: Option<&Dataset>,
    config: &TrainConfig,
) -> Result<FinetuneOutput> {
    config.validate()?;
    check_data(model, train)?;
    let mut model = model.clone();
    let mut opt = Optimizer::new(config.optimizer, config.learning_rate);
    let mut log = TrainLog::default();
    for step in 0..config.steps {
        let diverged = |m: &ToyTransformer| QtError::Diverged {
            step,
            last_good: Box::new(ModelCheckpoint {
                model: m.clone(),
                quant_specs: BTreeMap::new(),
                metadata: TrainingMetadata {
                    steps: step,
                    final_alpha: step_alpha(&config.outlier, step),
                },
            }),
        };
        let mut rec = match record_step(&model, train, config, step) {
            Ok(r) => r,
            Err(e) => {
                return Err(if produces_non_finite(&model, train, config, step) { diverged(&model) } else { e });
            }
        };
        if !rec.losses.total.is_finite() {
            return Err(diverged(&model));
        }
        if rec.tape.backward(rec.total).is_err() {
            return Err(diverged(&model));
        }
        let mut grads = BTreeMap::new();
        for (name, &v) in &rec.params {
            if let Some(g) = rec.tape.grad(v) {
                if !g.all_finite() {
                    return Err(diverged(&model));
                }
                grads.insert(name.clone(), g);
            }
        }
        let eval_accuracy = match eval {
            Some(ev) if config.eval_every > 0 && step % config.eval_every == 0 => {
                Some(evaluate(&model, ev, None)?.accuracy)
            }
            _ => None,
        };
        let l = rec.losses;
        let mean = l.site_metrics.values().sum::<f64>() / l.site_metrics.len() as f64;
        log.records.push(TrainRecord {
            step,
            alpha: l.alpha,
            cls_loss: l.cls,
            out_loss: l.out,
            total_loss: l.total,
            mean_site_metric: mean,
            site_metrics: l.site_metrics,
            eval_accuracy,
        });
        opt.step(model.weights_mut(), &grads);
        if model.weights().values().any(|w| !w.all_finite()) {
            return Err(diverged(&model));
        }
    }
    Ok(FinetuneOutput {
        checkpoint: ModelCheckpoint {
            model,
            quant_specs: BTreeMap::new(),
            metadata: TrainingMetadata {
                steps: config.steps,
                final_alpha: step_alpha(&config.outlier, config.steps),
            },
        },
        log,
    })
}

fn produces_non_finite(model: &ToyTransformer, data: &Dataset, config: &TrainConfig, step: usize) -> bool {
    let idx = batch_indices(data.len(), config.batch_size, config.seed, step);
    match data.batch(&idx).and_then(|(x, _)| model.capture(&x, None)) {
        Ok((logits, sites)) => !logits.all_finite() || sites.iter().any(|t| !t.all_finite()),
        Err(_) => false,
    }
}

fn check_data(model: &ToyTransformer, data: &Dataset) -> Result<()> {
    let c = model.config();
    if data.is_empty() {
        return Err(QtError::data("dataset is empty"));
    }
    if data.seq_len() != c.seq_len || data.input_dim() != c.input_dim || data.num_classes() != c.num_classes {
        return Err(QtError::dim(format!(
            "data ({}×{}, {} classes) does not match model ({}×{}, {} classes)",
            data.seq_len(),
            data.input_dim(),
            data.num_classes(),
            c.seq_len,
            c.input_dim,
            c.num_classes
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub predictions: Vec<usize>,
    /// Per-site decompositions on the first [`ANALYSIS_SAMPLES`] samples
    /// (empty for full-precision runs).
    pub decompositions: Vec<ErrorDecomposition>,
}

/// Top-1 accuracy over `data`, optionally under whole-model quantization.
pub fn evaluate(model: &ToyTransformer, data: &Dataset, plan: Option<&QuantPlan>) -> Result<Evaluation> {
    check_data(model, data)?;
    let quantized = plan.map(|p| quantize_model(model, p)).transpose()?;
    let chunks: Vec<(usize, usize)> = (0..data.len())
        .step_by(EVAL_CHUNK)
        .map(|s| (s, (s + EVAL_CHUNK).min(data.len())))
        .collect();
    let preds: Vec<Vec<usize>> = chunks
        .par_iter()
        .map(|&(s, e)| {
            let (x, _) = data.range(s, e)?;
            let logits = match &quantized {
                Some(q) => q.predict(&x)?,
                None => model.predict(&x, None)?,
            };
            Ok(argmax_rows(&logits))
        })
        .collect::<Result<_>>()?;
    let predictions: Vec<usize> = preds.into_iter().flatten().collect();
    let correct = predictions.iter().zip(data.labels()).filter(|(p, l)| p == l).count();
    let decompositions = match &quantized {
        Some(q) => {
            let (x, _) = data.range(0, ANALYSIS_SAMPLES)?;
            let (_, sites) = q.capture(&x)?;
            let ids = model.config().site_ids();
            ids.par_iter()
                .zip(sites.par_iter())
                .map(|(id, t)| decompose(id, t, &q.plan().activations[id]))
                .collect()
        }
        None => Vec::new(),
    };
    Ok(Evaluation {
        accuracy: correct as f64 / data.len() as f64,
        predictions,
        decompositions,
    })
}

/// Per-site activation summary of a model on a data sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationProfile {
    /// Mean outlier term `(max|A| - median|A|)/σ(A)` over samples.
    pub site_metric: BTreeMap<String, f64>,
    pub site_max_abs: BTreeMap<String, f64>,
}

impl ActivationProfile {
    pub fn mean_metric(&self) -> f64 {
        self.site_metric.values().sum::<f64>() / self.site_metric.len() as f64
    }

    pub fn mean_max_abs(&self) -> f64 {
        self.site_max_abs.values().sum::<f64>() / self.site_max_abs.len() as f64
    }
}

/// Measure every site on the first `samples` samples of `data`.
pub fn profile_activations(model: &ToyTransformer, data: &Dataset, samples: usize) -> Result<ActivationProfile> {
    check_data(model, data)?;
    let (x, _) = data.range(0, samples.max(1))?;
    let m = x.shape()[0];
    let (_, sites) = model.capture(&x, None)?;
    let mut p = ActivationProfile {
        site_metric: BTreeMap::new(),
        site_max_abs: BTreeMap::new(),
    };
    for (id, t) in model.config().site_ids().into_iter().zip(&sites) {
        let metric = site_metric(t.data(), m).ok_or(QtError::DegenerateActivation { site: id.clone() })?;
        p.site_metric.insert(id.clone(), metric);
        p.site_max_abs.insert(id, t.max_abs()?);
    }
    Ok(p)
}
