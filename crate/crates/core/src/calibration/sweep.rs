use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{calibrate, calibrated_range, ActivationStats, CalibrationMethod, CalibrationRecord};
use crate::analysis::{totals, ErrorDecomposition};
use crate::data::Dataset;
use crate::error::{QtError, Result};
use crate::model::{QuantPlan, ToyTransformer};
use crate::quant::QuantSpec;
use crate::train::evaluate;

/// Saturation thresholds tried by default, ascending.
pub const DEFAULT_SWEEP_THRESHOLDS: [f64; 10] = [
    0.99, 0.995, 0.999, 0.9995, 0.9999, 0.99994, 0.99997, 0.99999, 0.999995, 1.0,
];

/// Calibration sample: `batches` batches of `batch_size` samples drawn
/// without replacement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationProtocol {
    pub batches: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for CalibrationProtocol {
    fn default() -> Self {
        CalibrationProtocol {
            batches: 10,
            batch_size: 100,
            seed: 0,
        }
    }
}

/// Activation statistics for every observer site, in site order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteStats {
    sites: Vec<ActivationStats>,
}

impl SiteStats {
    pub fn new(sites: Vec<ActivationStats>) -> Self {
        SiteStats { sites }
    }

    pub fn sites(&self) -> &[ActivationStats] {
        &self.sites
    }

    pub fn get(&self, site_id: &str) -> Option<&ActivationStats> {
        self.sites.iter().find(|s| s.site_id == site_id)
    }

    /// Per-site activation specs at `bits`.
    pub fn specs(&self, method: &CalibrationMethod, bits: u8) -> Result<BTreeMap<String, QuantSpec>> {
        self.sites
            .iter()
            .map(|s| Ok((s.site_id.clone(), calibrate(s, method, bits)?)))
            .collect()
    }

    /// Report rows for `method` at `bits`.
    pub fn records(&self, method: &CalibrationMethod, bits: u8) -> Result<Vec<CalibrationRecord>> {
        self.sites
            .iter()
            .map(|s| {
                let r = calibrated_range(s, method, bits)?;
                Ok(CalibrationRecord::new(&s.site_id, method, r, &calibrate(s, method, bits)?))
            })
            .collect()
    }
}

/// Run the calibration protocol on `data` and summarize every site.
/// Batches run in parallel; merging follows batch order, so EMA sees the
/// batches in sequence.
pub fn collect_activation_stats(
    model: &ToyTransformer,
    data: &Dataset,
    protocol: &CalibrationProtocol,
) -> Result<SiteStats> {
    if protocol.batches == 0 || protocol.batch_size == 0 {
        return Err(QtError::config("calibration needs at least one non-empty batch"));
    }
    let need = protocol.batches * protocol.batch_size;
    if data.len() < need {
        return Err(QtError::data(format!(
            "calibration needs {need} samples, data has {}",
            data.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(protocol.seed);
    let order = rand::seq::index::sample(&mut rng, data.len(), need).into_vec();
    let ids = model.config().site_ids();
    let per_batch: Vec<Vec<ActivationStats>> = order
        .par_chunks(protocol.batch_size)
        .map(|idx| {
            let (x, _) = data.batch(idx)?;
            let (_, acts) = model.capture(&x, None)?;
            ids.iter()
                .zip(&acts)
                .map(|(id, t)| {
                    let mut s = ActivationStats::new(id.clone());
                    s.observe(t)?;
                    Ok(s)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let mut it = per_batch.into_iter();
    let mut acc = it.next().expect("at least one batch");
    for batch in it {
        for (a, b) in acc.iter_mut().zip(&batch) {
            a.merge(b);
        }
    }
    Ok(SiteStats::new(acc))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub threshold: f64,
    pub accuracy: f64,
    pub saturation_error: f64,
    pub precision_error: f64,
    pub precision_share: f64,
    pub kl: f64,
    pub sites: Vec<ErrorDecomposition>,
}

/// Quantize the model with every activation range at each threshold's
/// percentile (weights min-max at the same width) and evaluate on `data`.
pub fn saturation_sweep(
    model: &ToyTransformer,
    data: &Dataset,
    stats: &SiteStats,
    thresholds: &[f64],
    bits: u8,
) -> Result<Vec<SweepPoint>> {
    if data.is_empty() {
        return Err(QtError::data("sweep needs evaluation data"));
    }
    if thresholds.is_empty() {
        return Err(QtError::config("sweep needs at least one threshold"));
    }
    if let Some(t) = thresholds.iter().find(|&&t| !(t > 0.9 && t <= 1.0)) {
        return Err(QtError::domain(format!("threshold {t} outside (0.9, 1]")));
    }
    if thresholds.windows(2).any(|w| w[0] >= w[1]) {
        return Err(QtError::domain("thresholds must be strictly ascending"));
    }
    let weights = model.minmax_weight_specs(bits)?;
    thresholds
        .iter()
        .map(|&t| {
            let plan = QuantPlan {
                weights: weights.clone(),
                activations: stats.specs(&CalibrationMethod::Percentile { p: t }, bits)?,
            };
            let ev = evaluate(model, data, Some(&plan))?;
            let tot = totals(&ev.decompositions);
            Ok(SweepPoint {
                threshold: t,
                accuracy: ev.accuracy,
                saturation_error: tot.saturation_error,
                precision_error: tot.precision_error,
                precision_share: tot.precision_share,
                kl: tot.kl_divergence,
                sites: ev.decompositions,
            })
        })
        .collect()
}

/// Highest-accuracy point; ties go to the larger threshold.
pub fn best_point(points: &[SweepPoint]) -> Option<&SweepPoint> {
    points.iter().fold(None, |best: Option<&SweepPoint>, p| match best {
        Some(b) if b.accuracy > p.accuracy || (b.accuracy == p.accuracy && b.threshold > p.threshold) => Some(b),
        _ => Some(p),
    })
}

pub const SWEEP_CSV_HEADER: &str = "threshold,accuracy,saturation_error,precision_error,precision_share,kl";

pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut s = String::from(SWEEP_CSV_HEADER);
    s.push('\n');
    for p in points {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            p.threshold, p.accuracy, p.saturation_error, p.precision_error, p.precision_share, p.kl
        ));
    }
    s
}
