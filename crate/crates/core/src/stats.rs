//! Order statistics and streaming moments over raw `f64` slices.
//!
//! Absolute-value order statistics break ties by element index so that the
//! element defining a statistic (and therefore its subgradient) is fixed.

use std::cmp::Ordering;

/// Largest `|x|` together with the first index attaining it.
pub fn argmax_abs(data: &[f64]) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in data.iter().enumerate() {
        let a = v.abs();
        match best {
            Some((_, b)) if a <= b => {}
            _ => best = Some((i, a)),
        }
    }
    best
}

/// A quantile of `|x|` by linear interpolation between closest ranks.
///
/// `value = |x[lo]| + frac * (|x[hi]| - |x[lo]|)`; when the rank is exact,
/// `hi == lo` and `frac == 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AbsQuantile {
    pub lo: usize,
    pub hi: usize,
    pub frac: f64,
    pub value: f64,
}

fn abs_key_cmp(data: &[f64], a: usize, b: usize) -> Ordering {
    data[a]
        .abs()
        .total_cmp(&data[b].abs())
        .then_with(|| a.cmp(&b))
}

/// Quantile `p` of `|data|`. Returns `None` for empty input or `p` outside [0, 1].
pub fn abs_quantile(data: &[f64], p: f64) -> Option<AbsQuantile> {
    if data.is_empty() || !(0.0..=1.0).contains(&p) {
        return None;
    }
    let n = data.len();
    let h = p * (n - 1) as f64;
    let lo_rank = (h.floor() as usize).min(n - 1);
    let frac = h - lo_rank as f64;

    let mut idx: Vec<usize> = (0..n).collect();
    let (_, &mut lo, right) = idx.select_nth_unstable_by(lo_rank, |&a, &b| abs_key_cmp(data, a, b));
    let (hi, frac) = if frac > 0.0 && !right.is_empty() {
        let hi = *right
            .iter()
            .min_by(|&&a, &&b| abs_key_cmp(data, a, b))
            .expect("non-empty");
        (hi, frac)
    } else {
        (lo, 0.0)
    };
    let a = data[lo].abs();
    let b = data[hi].abs();
    Some(AbsQuantile {
        lo,
        hi,
        frac,
        value: a + frac * (b - a),
    })
}

/// Streaming mean/variance accumulator (Welford), mergeable across shards.
#[derive(Debug, Clone, Copy, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Moments {
    pub count: u64,
    pub mean: f64,
    pub m2: f64,
}

impl Moments {
    pub fn from_slice(data: &[f64]) -> Self {
        let mut m = Moments::default();
        for &v in data {
            m.push(v);
        }
        m
    }

    pub fn push(&mut self, v: f64) {
        self.count += 1;
        let delta = v - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (v - self.mean);
    }

    pub fn merge(&mut self, other: &Moments) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = *other;
            return;
        }
        let n = (self.count + other.count) as f64;
        let delta = other.mean - self.mean;
        let wa = self.count as f64 / n;
        let wb = other.count as f64 / n;
        self.mean = self.mean * wa + other.mean * wb;
        self.m2 += other.m2 + delta * delta * self.count as f64 * wb;
        self.count += other.count;
    }

    /// Population variance (divide by N).
    pub fn variance(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            (self.m2 / self.count as f64).max(0.0)
        }
    }

    pub fn std(&self) -> f64 {
        self.variance().sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_prefers_first_index_on_ties() {
        assert_eq!(argmax_abs(&[1.0, -3.0, 3.0]), Some((1, 3.0)));
        assert_eq!(argmax_abs(&[]), None);
    }

    #[test]
    fn quantile_interpolates_between_ranks() {
        let q = abs_quantile(&[1.0, -3.0], 0.5).unwrap();
        assert_eq!(q.value, 2.0);
        assert_eq!((q.lo, q.hi, q.frac), (0, 1, 0.5));

        let q = abs_quantile(&[4.0, -1.0, 2.0, 3.0], 1.0 / 3.0).unwrap();
        assert_eq!(q.value, 2.0);
        assert!(abs_quantile(&[1.0], 1.5).is_none());
    }

    #[test]
    fn moments_merge_matches_single_stream() {
        let data: Vec<f64> = (0..101).map(|i| ((i * 37) % 11) as f64 - 4.5).collect();
        let whole = Moments::from_slice(&data);
        let mut a = Moments::from_slice(&data[..40]);
        a.merge(&Moments::from_slice(&data[40..]));
        assert_eq!(a.count, whole.count);
        assert!((a.mean - whole.mean).abs() < 1e-12);
        assert!((a.variance() - whole.variance()).abs() < 1e-12);
    }
}
