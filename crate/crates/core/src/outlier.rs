//! Task loss, outlier-driven loss and their blend.
//!
//! The outlier term for one activation tensor `A` is
//! `(max|A| - median|A|) / σ(A)`: the distance of the largest magnitude from
//! the typical magnitude, measured in standard deviations of the signed
//! values. The loss averages it over observer sites and batch samples.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{QtError, Result};
use crate::tape::{outlier_term_value, Tape, Var};
use crate::tensor::Tensor;

/// Where an observer sits relative to its layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SiteKind {
    LinearInput,
    LinearOutput,
    LayerNormInput,
    LayerNormOutput,
}

impl SiteKind {
    pub fn is_layer_norm(self) -> bool {
        matches!(self, SiteKind::LayerNormInput | SiteKind::LayerNormOutput)
    }
}

/// An instrumented tensor: the input or output of a linear or LayerNorm layer.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ObserverSite {
    pub site_id: String,
    pub kind: SiteKind,
    /// Transformer block the layer belongs to; `None` for the stem and head.
    pub block_index: Option<usize>,
    /// Name of the observed layer (e.g. `blocks.0.qkv`).
    pub layer: String,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AlphaSchedule {
    Constant,
    LinearDecay { total_steps: usize },
    CosineDecay { total_steps: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub enum SiteSelection {
    All,
    Only(Vec<String>),
}

impl SiteSelection {
    pub fn includes(&self, site_id: &str) -> bool {
        match self {
            SiteSelection::All => true,
            SiteSelection::Only(ids) => ids.iter().any(|s| s == site_id),
        }
    }
}

/// Balance factor, its decay and the sites the outlier loss covers.
///
/// JSON form: `{"alpha": 0.5, "schedule": "linear", "total_steps": N, "sites": "all" | [ids]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawOutlierConfig", into = "RawOutlierConfig")]
pub struct OutlierLossConfig {
    pub alpha: f64,
    pub schedule: AlphaSchedule,
    pub sites: SiteSelection,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum RawSites {
    Keyword(String),
    List(Vec<String>),
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOutlierConfig {
    alpha: f64,
    #[serde(default = "default_schedule")]
    schedule: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    total_steps: Option<usize>,
    #[serde(default = "default_sites")]
    sites: RawSites,
}

fn default_schedule() -> String {
    "linear".into()
}

fn default_sites() -> RawSites {
    RawSites::Keyword("all".into())
}

impl TryFrom<RawOutlierConfig> for OutlierLossConfig {
    type Error = QtError;

    fn try_from(raw: RawOutlierConfig) -> Result<Self> {
        let need_steps = || {
            raw.total_steps
                .ok_or_else(|| QtError::config(format!("schedule `{}` needs total_steps", raw.schedule)))
        };
        let schedule = match raw.schedule.as_str() {
            "constant" => AlphaSchedule::Constant,
            "linear" => AlphaSchedule::LinearDecay {
                total_steps: need_steps()?,
            },
            "cosine" => AlphaSchedule::CosineDecay {
                total_steps: need_steps()?,
            },
            other => return Err(QtError::config(format!("unknown alpha schedule `{other}`"))),
        };
        let sites = match raw.sites {
            RawSites::Keyword(k) if k == "all" => SiteSelection::All,
            RawSites::Keyword(k) => return Err(QtError::config(format!("bad site selection `{k}`"))),
            RawSites::List(ids) => SiteSelection::Only(ids),
        };
        let cfg = OutlierLossConfig {
            alpha: raw.alpha,
            schedule,
            sites,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl From<OutlierLossConfig> for RawOutlierConfig {
    fn from(c: OutlierLossConfig) -> Self {
        let (schedule, total_steps) = match c.schedule {
            AlphaSchedule::Constant => ("constant", None),
            AlphaSchedule::LinearDecay { total_steps } => ("linear", Some(total_steps)),
            AlphaSchedule::CosineDecay { total_steps } => ("cosine", Some(total_steps)),
        };
        RawOutlierConfig {
            alpha: c.alpha,
            schedule: schedule.into(),
            total_steps,
            sites: match c.sites {
                SiteSelection::All => RawSites::Keyword("all".into()),
                SiteSelection::Only(ids) => RawSites::List(ids),
            },
        }
    }
}

impl OutlierLossConfig {
    /// Outlier loss switched off.
    pub fn disabled() -> Self {
        OutlierLossConfig {
            alpha: 0.0,
            schedule: AlphaSchedule::Constant,
            sites: SiteSelection::All,
        }
    }

    pub fn linear(alpha: f64, total_steps: usize) -> Self {
        OutlierLossConfig {
            alpha,
            schedule: AlphaSchedule::LinearDecay { total_steps },
            sites: SiteSelection::All,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(QtError::domain(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        match self.schedule {
            AlphaSchedule::LinearDecay { total_steps } | AlphaSchedule::CosineDecay { total_steps }
                if total_steps == 0 =>
            {
                Err(QtError::config("decay schedules need total_steps >= 1"))
            }
            _ => Ok(()),
        }
    }
}

/// Alpha in effect at `step`.
pub fn step_alpha(config: &OutlierLossConfig, step: usize) -> f64 {
    let a = config.alpha;
    match config.schedule {
        AlphaSchedule::Constant => a,
        AlphaSchedule::LinearDecay { total_steps } => {
            a * (1.0 - step as f64 / total_steps as f64).max(0.0)
        }
        AlphaSchedule::CosineDecay { total_steps } => {
            let t = (step as f64 / total_steps as f64).min(1.0);
            a * (1.0 + (PI * t).cos()) / 2.0
        }
    }
}

fn check_one_hot(labels: &Tensor) -> Result<()> {
    let (m, k) = labels.dims2()?;
    if m == 0 {
        return Err(QtError::domain("classification loss needs at least one sample"));
    }
    for (i, row) in labels.data().chunks(k).enumerate() {
        let ones = row.iter().filter(|&&v| v == 1.0).count();
        let zeros = row.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || zeros != k - 1 {
            return Err(QtError::domain(format!("label row {i} is not one-hot")));
        }
    }
    Ok(())
}

/// Mean cross-entropy of `softmax(logits)` against one-hot `labels`.
pub fn classification_loss(tape: &mut Tape, logits: Var, labels: &Tensor) -> Result<Var> {
    let (m, k) = tape.value(logits).dims2()?;
    if labels.shape() != [m, k] {
        return Err(QtError::dim(format!(
            "labels {:?} do not match logits {m}×{k}",
            labels.shape()
        )));
    }
    check_one_hot(labels)?;
    tape.cross_entropy(logits, labels)
}

/// Outlier-driven loss over `activations`, each a site id with a tensor whose
/// rows split into `samples` per-sample blocks.
pub fn outlier_loss(tape: &mut Tape, activations: &[(&str, Var)], samples: usize) -> Result<Var> {
    outlier_loss_by_site(tape, activations, samples).map(|(v, _)| v)
}

/// [`outlier_loss`] together with each site's mean term, in input order.
pub fn outlier_loss_by_site(
    tape: &mut Tape,
    activations: &[(&str, Var)],
    samples: usize,
) -> Result<(Var, Vec<f64>)> {
    if activations.is_empty() {
        return Err(QtError::config("outlier loss needs at least one observer site"));
    }
    let mut per_site = Vec::with_capacity(activations.len());
    for &(site, v) in activations {
        let terms = tape.outlier_terms(v, samples).map_err(|e| match e {
            QtError::DegenerateActivation { .. } => QtError::DegenerateActivation { site: site.to_string() },
            other => other,
        })?;
        per_site.push(tape.sum(terms));
    }
    let means = per_site.iter().map(|&v| tape.value(v).item() / samples as f64).collect();
    let total = tape.sum_n(&per_site)?;
    Ok((tape.scale(total, 1.0 / (samples * activations.len()) as f64), means))
}

/// `(1 - alpha)·cls + alpha·out`. At `alpha = 0` the outlier branch is left
/// unconnected, so backward never visits it.
pub fn total_loss(tape: &mut Tape, cls: Var, out: Var, alpha: f64) -> Result<Var> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(QtError::domain(format!("alpha {alpha} outside [0, 1]")));
    }
    if alpha == 0.0 {
        return Ok(tape.scale(cls, 1.0));
    }
    let a = tape.scale(cls, 1.0 - alpha);
    let b = tape.scale(out, alpha);
    tape.add(a, b)
}

/// Mean outlier term of a site tensor over its per-sample blocks (no tape).
pub fn site_metric(values: &[f64], samples: usize) -> Option<f64> {
    if samples == 0 || !values.len().is_multiple_of(samples) {
        return None;
    }
    let per = values.len() / samples;
    let mut sum = 0.0;
    for chunk in values.chunks(per) {
        sum += outlier_term_value(chunk)?;
    }
    Some(sum / samples as f64)
}
