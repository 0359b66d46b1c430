//! Saturation / precision-loss split of quantization error, histogram KL,
//! and per-block dynamic-range reports.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::calibration::SiteStats;
use crate::error::{QtError, Result};
use crate::model::ToyTransformer;
use crate::quant::{scale_from_range, QuantSpec};
use crate::tensor::Tensor;

pub const DEFAULT_KL_BINS: usize = 512;
const KL_EPS: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorDecomposition {
    pub site_id: String,
    /// Σ (|x| - clip)² over clipped elements.
    pub saturation_error: f64,
    /// Σ (x - q(x))² over unclipped elements.
    pub precision_error: f64,
    pub total_error: f64,
    pub precision_share: f64,
    pub kl_divergence: f64,
    pub range_before: f64,
    pub range_after: f64,
}

/// Split the error of quantizing `x` with `spec`. Clipped elements count
/// toward saturation only.
pub fn decompose(site_id: &str, x: &Tensor, spec: &QuantSpec) -> ErrorDecomposition {
    let clip = spec.clip_bound();
    let (mut sat, mut prec) = (0.0, 0.0);
    let mut max = 0.0f64;
    for &v in x.data() {
        let a = v.abs();
        max = max.max(a);
        if a > clip {
            sat += (a - clip) * (a - clip);
        } else {
            let e = v - spec.fake_quant_value(v);
            prec += e * e;
        }
    }
    let total = sat + prec;
    ErrorDecomposition {
        site_id: site_id.to_string(),
        saturation_error: sat,
        precision_error: prec,
        total_error: total,
        precision_share: if total > 0.0 { prec / total } else { 0.0 },
        kl_divergence: kl_precision_loss(x, spec, DEFAULT_KL_BINS).unwrap_or(0.0),
        range_before: max,
        range_after: clip.min(max),
    }
}

/// `KL(P‖Q)` between `bins`-bin histograms of `x` and its fake quantization
/// over `[-max|x|, max|x|]`, each smoothed by `1e-10` and renormalized.
/// All-equal tensors give 0.
pub fn kl_precision_loss(x: &Tensor, spec: &QuantSpec, bins: usize) -> Result<f64> {
    if bins < 16 {
        return Err(QtError::domain(format!("KL needs at least 16 bins, got {bins}")));
    }
    if x.is_empty() {
        return Err(QtError::domain("KL of an empty tensor"));
    }
    let d = x.data();
    if d.iter().all(|&v| v == d[0]) {
        return Ok(0.0);
    }
    let m = x.max_abs()?;
    let inv_width = bins as f64 / (2.0 * m);
    let hist = |vals: &mut dyn Iterator<Item = f64>| {
        let mut h = vec![0.0; bins];
        for v in vals {
            let t = (v + m) * inv_width;
            h[(t.max(0.0) as usize).min(bins - 1)] += 1.0;
        }
        let total: f64 = h.iter().map(|c| c + KL_EPS).sum();
        h.iter_mut().for_each(|c| *c = (*c + KL_EPS) / total);
        h
    };
    let p = hist(&mut d.iter().copied());
    let q = hist(&mut d.iter().map(|&v| spec.fake_quant_value(v)));
    Ok(p.iter().zip(&q).map(|(&pi, &qi)| pi * (pi / qi).ln()).sum::<f64>().max(0.0))
}

/// Sums over a set of sites.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ErrorTotals {
    pub saturation_error: f64,
    pub precision_error: f64,
    pub total_error: f64,
    /// Σ precision / Σ total.
    pub precision_share: f64,
    pub kl_divergence: f64,
}

pub fn totals(decomps: &[ErrorDecomposition]) -> ErrorTotals {
    let mut t = ErrorTotals::default();
    for d in decomps {
        t.saturation_error += d.saturation_error;
        t.precision_error += d.precision_error;
        t.kl_divergence += d.kl_divergence;
    }
    t.total_error = t.saturation_error + t.precision_error;
    t.precision_share = if t.total_error > 0.0 { t.precision_error / t.total_error } else { 0.0 };
    t
}

pub const DECOMPOSITION_CSV_HEADER: &str =
    "site_id,range_before,range_after,saturation_error,precision_error,precision_share,kl";

pub fn decompositions_csv(decomps: &[ErrorDecomposition]) -> String {
    let mut s = String::from(DECOMPOSITION_CSV_HEADER);
    s.push('\n');
    for d in decomps {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            d.site_id,
            d.range_before,
            d.range_after,
            d.saturation_error,
            d.precision_error,
            d.precision_share,
            d.kl_divergence
        );
    }
    s
}

/// Dynamic range of one transformer block's output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockRange {
    pub block: usize,
    /// Site where the block output is observed (the next LayerNorm input).
    pub site_id: String,
    pub range_before: f64,
    pub range_after: f64,
    /// KL summed over every observer site inside the block.
    pub kl: f64,
}

/// One row per block, in depth order. Ranges come from calibration stats:
/// `range_before` is the maximum, `range_after` the `threshold` percentile.
/// KL is measured on `sites`, the site activations of an analysis batch in
/// site order, each quantized at `bits` with its saturated range.
pub fn dynamic_range_report(
    model: &ToyTransformer,
    stats: &SiteStats,
    sites: &[Tensor],
    threshold: f64,
    bits: u8,
) -> Result<Vec<BlockRange>> {
    let cfg = model.config();
    let all = cfg.sites();
    if sites.len() != all.len() {
        return Err(QtError::dim(format!(
            "{} site activations for {} sites",
            sites.len(),
            all.len()
        )));
    }
    let lookup = |id: &str| {
        stats
            .get(id)
            .filter(|s| s.sample_count() > 0)
            .ok_or_else(|| QtError::State(format!("no calibration stats for site `{id}`")))
    };
    let mut rows = Vec::with_capacity(cfg.depth);
    for b in 0..cfg.depth {
        let out_site = if b + 1 < cfg.depth {
            format!("blocks.{}.ln1.input", b + 1)
        } else {
            "ln_f.input".to_string()
        };
        let st = lookup(&out_site)?;
        let mut kl = 0.0;
        for (site, x) in all.iter().zip(sites) {
            if site.block_index != Some(b) {
                continue;
            }
            let r = lookup(&site.site_id)?.percentile(threshold)?;
            if r > 0.0 {
                kl += kl_precision_loss(x, &scale_from_range(r, bits)?, DEFAULT_KL_BINS)?;
            }
        }
        rows.push(BlockRange {
            block: b,
            site_id: out_site.clone(),
            range_before: st.max_abs(),
            range_after: st.percentile(threshold)?,
            kl,
        });
    }
    Ok(rows)
}

pub const BLOCK_RANGE_CSV_HEADER: &str = "block,site_id,range_before,range_after,kl";

pub fn block_ranges_csv(rows: &[BlockRange]) -> String {
    let mut s = String::from(BLOCK_RANGE_CSV_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{}", r.block, r.site_id, r.range_before, r.range_after, r.kl);
    }
    s
}

/// Spearman rank correlation (average ranks for ties). `None` when either
/// side is constant or the lengths differ.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let mean = (a.len() as f64 + 1.0) / 2.0;
    let (mut num, mut da, mut db) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        num += (x - mean) * (y - mean);
        da += (x - mean) * (x - mean);
        db += (y - mean) * (y - mean);
    }
    if da == 0.0 || db == 0.0 {
        return None;
    }
    Some(num / (da * db).sqrt())
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}
