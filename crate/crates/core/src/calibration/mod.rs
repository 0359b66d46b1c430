//! Activation statistics and range calibration.
//!
//! Four baselines pick a per-tensor range `r` from observed activations
//! (min-max, EMA of per-batch maxima, pooled percentile, and an MSE-optimal
//! search over a geometric grid); the range becomes a [`QuantSpec`] through
//! [`scale_from_range`].

mod histogram;
mod sweep;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{QtError, Result};
use crate::quant::{scale_from_range, QuantSpec};
use crate::stats::Moments;
use crate::tensor::Tensor;

pub use histogram::{AbsHistogram, DEFAULT_BINS};
pub use sweep::{
    best_point, collect_activation_stats, saturation_sweep, sweep_csv, CalibrationProtocol, SiteStats,
    SweepPoint, DEFAULT_SWEEP_THRESHOLDS, SWEEP_CSV_HEADER,
};

pub const DEFAULT_EMA_DECAY: f64 = 0.9;
pub const DEFAULT_OMSE_GRID: usize = 128;

/// Running summary of the activations seen at one observer site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationStats {
    pub site_id: String,
    max_abs: f64,
    moments: Moments,
    histogram: AbsHistogram,
    batch_max: Vec<f64>,
    sample_count: u64,
}

impl ActivationStats {
    pub fn new(site_id: impl Into<String>) -> Self {
        Self::with_bins(site_id, DEFAULT_BINS)
    }

    pub fn with_bins(site_id: impl Into<String>, bins: usize) -> Self {
        ActivationStats {
            site_id: site_id.into(),
            max_abs: 0.0,
            moments: Moments::default(),
            histogram: AbsHistogram::new(bins),
            batch_max: Vec::new(),
            sample_count: 0,
        }
    }

    /// Fold one calibration batch into the summary.
    pub fn observe(&mut self, batch: &Tensor) -> Result<()> {
        self.observe_values(batch.data())
    }

    pub fn observe_values(&mut self, values: &[f64]) -> Result<()> {
        if values.is_empty() {
            return Err(QtError::data(format!("empty batch at site `{}`", self.site_id)));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(QtError::data(format!("non-finite activation at site `{}`", self.site_id)));
        }
        let bm = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        self.max_abs = self.max_abs.max(bm);
        self.histogram.grow(self.max_abs);
        self.histogram.add_abs(values);
        for &v in values {
            self.moments.push(v);
        }
        self.batch_max.push(bm);
        self.sample_count += values.len() as u64;
        Ok(())
    }

    /// Combine shards. Commutative except for the batch order used by EMA,
    /// which follows `self` then `other`.
    pub fn merge(&mut self, other: &ActivationStats) {
        self.max_abs = self.max_abs.max(other.max_abs);
        self.moments.merge(&other.moments);
        self.histogram.merge(&other.histogram);
        self.batch_max.extend_from_slice(&other.batch_max);
        self.sample_count += other.sample_count;
    }

    pub fn max_abs(&self) -> f64 {
        self.max_abs
    }

    /// Median of `|x|` estimated from the histogram.
    pub fn median_abs(&self) -> f64 {
        self.histogram.quantile(0.5)
    }

    /// Population standard deviation from streaming moments.
    pub fn stddev(&self) -> f64 {
        self.moments.std()
    }

    /// Pooled quantile of `|x|` from the histogram; `p = 1` is exactly `max_abs`.
    pub fn percentile(&self, p: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&p) {
            return Err(QtError::domain(format!("percentile fraction {p} outside [0, 1]")));
        }
        if p >= 1.0 {
            return Ok(self.max_abs);
        }
        Ok(self.histogram.quantile(p))
    }

    pub fn histogram(&self) -> &AbsHistogram {
        &self.histogram
    }

    pub fn batch_max(&self) -> &[f64] {
        &self.batch_max
    }

    pub fn sample_count(&self) -> u64 {
        self.sample_count
    }

    /// Histogram-estimated mean squared quantization error under `spec`.
    pub fn histogram_mse(&self, spec: &QuantSpec) -> f64 {
        self.histogram.expected_sq_error(spec.clip_bound(), spec.scale())
    }
}

/// Range-selection rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CalibrationMethod {
    MinMax,
    /// Exponential average of per-batch maxima; `decay` weights the newest batch.
    Ema { decay: f64 },
    Percentile { p: f64 },
    Omse { grid_points: usize },
}

impl CalibrationMethod {
    pub fn validate(&self) -> Result<()> {
        match *self {
            CalibrationMethod::MinMax => Ok(()),
            CalibrationMethod::Ema { decay } if decay > 0.0 && decay < 1.0 => Ok(()),
            CalibrationMethod::Ema { decay } => {
                Err(QtError::domain(format!("EMA decay {decay} outside (0, 1)")))
            }
            CalibrationMethod::Percentile { p } if p > 0.0 && p <= 1.0 => Ok(()),
            CalibrationMethod::Percentile { p } => {
                Err(QtError::domain(format!("percentile {p} outside (0, 1]")))
            }
            CalibrationMethod::Omse { grid_points } if grid_points >= 1 => Ok(()),
            CalibrationMethod::Omse { .. } => Err(QtError::domain("OMSE grid needs at least one point")),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            CalibrationMethod::MinMax => "minmax",
            CalibrationMethod::Ema { .. } => "ema",
            CalibrationMethod::Percentile { .. } => "percentile",
            CalibrationMethod::Omse { .. } => "omse",
        }
    }

    /// The method's numeric parameter, if it has one.
    pub fn param(&self) -> Option<f64> {
        match *self {
            CalibrationMethod::MinMax => None,
            CalibrationMethod::Ema { decay } => Some(decay),
            CalibrationMethod::Percentile { p } => Some(p),
            CalibrationMethod::Omse { grid_points } => Some(grid_points as f64),
        }
    }

    /// The four baselines with their default parameters.
    pub fn baselines() -> [CalibrationMethod; 4] {
        [
            CalibrationMethod::MinMax,
            CalibrationMethod::Ema {
                decay: DEFAULT_EMA_DECAY,
            },
            CalibrationMethod::Percentile { p: 0.99999 },
            CalibrationMethod::Omse {
                grid_points: DEFAULT_OMSE_GRID,
            },
        ]
    }
}

impl fmt::Display for CalibrationMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            CalibrationMethod::MinMax => write!(f, "minmax"),
            CalibrationMethod::Ema { decay } => write!(f, "ema:{decay}"),
            CalibrationMethod::Percentile { p } => write!(f, "percentile:{p}"),
            CalibrationMethod::Omse { grid_points } => write!(f, "omse:{grid_points}"),
        }
    }
}

/// Parses `minmax`, `ema[:decay]`, `percentile[:p]`, `omse[:grid]`.
impl FromStr for CalibrationMethod {
    type Err = QtError;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, arg) = match s.split_once(':') {
            Some((k, a)) => (k, Some(a)),
            None => (s, None),
        };
        let num = |a: Option<&str>, default: f64| -> Result<f64> {
            match a {
                None => Ok(default),
                Some(a) => a
                    .trim()
                    .parse::<f64>()
                    .map_err(|_| QtError::config(format!("bad calibration parameter `{a}`"))),
            }
        };
        let m = match kind.trim().to_ascii_lowercase().as_str() {
            "minmax" | "min-max" if arg.is_none() => CalibrationMethod::MinMax,
            "ema" => CalibrationMethod::Ema {
                decay: num(arg, DEFAULT_EMA_DECAY)?,
            },
            "percentile" => CalibrationMethod::Percentile { p: num(arg, 0.99999)? },
            "omse" | "mse" => {
                let g = num(arg, DEFAULT_OMSE_GRID as f64)?;
                if g.fract() != 0.0 || !(1.0..=1e6).contains(&g) {
                    return Err(QtError::config(format!("bad OMSE grid size `{g}`")));
                }
                CalibrationMethod::Omse {
                    grid_points: g as usize,
                }
            }
            _ => return Err(QtError::config(format!("unknown calibration method `{s}`"))),
        };
        m.validate()?;
        Ok(m)
    }
}

impl Serialize for CalibrationMethod {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for CalibrationMethod {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Geometric candidate grid between the median and the maximum of `|x|`.
pub fn omse_grid(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    if points <= 1 || hi <= 0.0 {
        return vec![hi];
    }
    let lo = if lo > 0.0 && lo < hi { lo } else { hi * 1e-3 };
    let ratio = (hi / lo).ln();
    let mut g: Vec<f64> = (0..points)
        .map(|i| lo * (ratio * i as f64 / (points - 1) as f64).exp())
        .collect();
    g[points - 1] = hi;
    g
}

/// Range `r` chosen by `method`.
pub fn calibrated_range(stats: &ActivationStats, method: &CalibrationMethod, bits: u8) -> Result<f64> {
    method.validate()?;
    if stats.sample_count == 0 {
        return Err(QtError::State(format!("site `{}` has no observations", stats.site_id)));
    }
    let r = match *method {
        CalibrationMethod::MinMax => stats.max_abs,
        CalibrationMethod::Ema { decay } => ema(&stats.batch_max, decay),
        CalibrationMethod::Percentile { p } => stats.percentile(p)?,
        CalibrationMethod::Omse { grid_points } => {
            if stats.max_abs <= 0.0 {
                0.0
            } else {
                let grid = omse_grid(stats.median_abs(), stats.max_abs, grid_points);
                let mut best = (f64::INFINITY, stats.max_abs);
                for &r in &grid {
                    let spec = scale_from_range(r, bits)?;
                    let mse = stats.histogram_mse(&spec);
                    if mse < best.0 {
                        best = (mse, r);
                    }
                }
                best.1
            }
        }
    };
    if !(r > 0.0) {
        return Err(QtError::Degenerate(format!(
            "site `{}` has zero range under {method}",
            stats.site_id
        )));
    }
    Ok(r)
}

/// `ema_1 = m_1`, `ema_t = decay·m_t + (1 - decay)·ema_{t-1}`.
fn ema(batch_max: &[f64], decay: f64) -> f64 {
    let mut it = batch_max.iter();
    let Some(&first) = it.next() else { return 0.0 };
    it.fold(first, |acc, &m| decay * m + (1.0 - decay) * acc)
}

/// Calibrate one site: choose the range, then derive the scale.
pub fn calibrate(stats: &ActivationStats, method: &CalibrationMethod, bits: u8) -> Result<QuantSpec> {
    scale_from_range(calibrated_range(stats, method, bits)?, bits)
}

/// One row of the calibration report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationRecord {
    pub site_id: String,
    pub method: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub param: Option<f64>,
    pub range: f64,
    pub scale: f64,
    pub bits: u8,
}

impl CalibrationRecord {
    pub fn new(site_id: &str, method: &CalibrationMethod, range: f64, spec: &QuantSpec) -> Self {
        CalibrationRecord {
            site_id: site_id.to_string(),
            method: method.name().to_string(),
            param: method.param(),
            range,
            scale: spec.scale(),
            bits: spec.bits(),
        }
    }

    pub fn spec(&self) -> Result<QuantSpec> {
        QuantSpec::new(self.bits, self.scale)
    }
}

/// Parse a calibration report (JSON array of records).
pub fn parse_calibration_report(bytes: &[u8]) -> Result<Vec<CalibrationRecord>> {
    let records: Vec<CalibrationRecord> = serde_json::from_slice(bytes)?;
    for r in &records {
        r.spec()?;
    }
    Ok(records)
}
