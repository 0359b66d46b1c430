use serde::{Deserialize, Serialize};

pub const DEFAULT_BINS: usize = 2048;

/// Fixed-bin histogram of `|x|` over `[0, upper]`, where `upper` is the
/// running maximum. When the maximum grows, existing counts are spread over
/// the new bins in proportion to interval overlap, so counts are fractional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbsHistogram {
    counts: Vec<f64>,
    upper: f64,
}

impl AbsHistogram {
    pub fn new(bins: usize) -> Self {
        assert!(bins > 0, "histogram needs at least one bin");
        AbsHistogram {
            counts: vec![0.0; bins],
            upper: 0.0,
        }
    }

    pub fn bins(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[f64] {
        &self.counts
    }

    pub fn upper(&self) -> f64 {
        self.upper
    }

    pub fn total(&self) -> f64 {
        self.counts.iter().sum()
    }

    /// Left edge of bin `i` (`i == bins` gives `upper` exactly).
    pub fn edge(&self, i: usize) -> f64 {
        self.upper * i as f64 / self.counts.len() as f64
    }

    fn bin_of(&self, a: f64) -> usize {
        let n = self.counts.len();
        if self.upper <= 0.0 {
            return 0;
        }
        ((a / self.upper * n as f64) as usize).min(n - 1)
    }

    /// Extend the range to `new_upper`, redistributing counts proportionally.
    pub fn grow(&mut self, new_upper: f64) {
        if new_upper <= self.upper {
            return;
        }
        let n = self.counts.len();
        let old = std::mem::replace(&mut self.counts, vec![0.0; n]);
        let old_upper = self.upper;
        self.upper = new_upper;
        if old_upper <= 0.0 {
            // everything seen so far was exactly zero
            self.counts[0] = old.iter().sum();
            return;
        }
        let w0 = old_upper / n as f64;
        let w1 = new_upper / n as f64;
        for (i, &c) in old.iter().enumerate() {
            if c == 0.0 {
                continue;
            }
            let mut lo = i as f64 * w0;
            let hi = lo + w0;
            let mut j = ((lo / w1) as usize).min(n - 1);
            while lo < hi {
                let edge = if j == n - 1 { f64::INFINITY } else { (j + 1) as f64 * w1 };
                let seg = hi.min(edge) - lo;
                self.counts[j] += c * seg / w0;
                lo = hi.min(edge);
                j += 1;
            }
        }
    }

    /// Add `|v|` for each value; the range must already cover them.
    pub fn add_abs(&mut self, values: &[f64]) {
        for &v in values {
            let b = self.bin_of(v.abs());
            self.counts[b] += 1.0;
        }
    }

    /// Merge another histogram (ranges are unified first).
    pub fn merge(&mut self, other: &AbsHistogram) {
        assert_eq!(self.bins(), other.bins(), "bin counts differ");
        let upper = self.upper.max(other.upper);
        self.grow(upper);
        let mut o = other.clone();
        o.grow(upper);
        for (a, b) in self.counts.iter_mut().zip(&o.counts) {
            *a += b;
        }
    }

    /// Quantile of the represented `|x|` distribution, assuming values spread
    /// uniformly inside each bin. `p >= 1` returns `upper`.
    pub fn quantile(&self, p: f64) -> f64 {
        if p >= 1.0 {
            return self.upper;
        }
        let total = self.total();
        if total <= 0.0 {
            return 0.0;
        }
        let target = p.max(0.0) * total;
        let mut cum = 0.0;
        let mut last_nonempty = 0;
        for (i, &c) in self.counts.iter().enumerate() {
            if c <= 0.0 {
                continue;
            }
            last_nonempty = i;
            if cum + c >= target {
                let frac = ((target - cum) / c).clamp(0.0, 1.0);
                let lo = self.edge(i);
                return lo + frac * (self.edge(i + 1) - lo);
            }
            cum += c;
        }
        self.edge(last_nonempty + 1)
    }

    /// Expected squared quantization error per element when quantizing the
    /// represented distribution with clip bound `clip` and step `scale`,
    /// integrating exactly over each bin under the uniform-within-bin model.
    pub fn expected_sq_error(&self, clip: f64, scale: f64) -> f64 {
        let total = self.total();
        if total <= 0.0 {
            return 0.0;
        }
        let mut sum = 0.0;
        for (i, &c) in self.counts.iter().enumerate() {
            if c <= 0.0 {
                continue;
            }
            let (a, b) = (self.edge(i), self.edge(i + 1));
            let w = b - a;
            if w <= 0.0 {
                continue;
            }
            let mut integral = 0.0;
            if a < clip {
                let hi = b.min(clip);
                integral += rounding_sq_integral(hi, scale) - rounding_sq_integral(a, scale);
            }
            if b > clip {
                let lo = a.max(clip);
                integral += ((b - clip).powi(3) - (lo - clip).powi(3)) / 3.0;
            }
            sum += c * integral / w;
        }
        sum / total
    }
}

/// `∫₀ˣ (t - s·round(t/s))² dt` for `x ≥ 0`.
fn rounding_sq_integral(x: f64, s: f64) -> f64 {
    let u = x / s + 0.5;
    let n = u.floor();
    let f = u - n; // position inside the current period, in [0, 1)
    let s3 = s * s * s;
    // n full periods of s³/12, plus the partial period starting at error -s/2
    n * s3 / 12.0 + s3 * ((f - 0.5).powi(3) + 0.125) / 3.0 - s3 / 24.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rounding_integral_matches_quadrature() {
        let s = 0.3;
        for &x in &[0.0, 0.1, 0.15, 0.29, 0.45, 1.0, 2.37] {
            let steps = 200_000;
            let h = x / steps as f64;
            let mut q = 0.0;
            for k in 0..steps {
                let t = (k as f64 + 0.5) * h;
                let e = t - s * (t / s).round();
                q += e * e * h;
            }
            assert!((rounding_sq_integral(x, s) - q).abs() < 1e-9, "x={x}");
        }
    }

    #[test]
    fn grow_preserves_total_and_upper_quantile() {
        let mut h = AbsHistogram::new(16);
        h.grow(1.0);
        h.add_abs(&[0.1, 0.2, 0.9, -1.0]);
        h.grow(3.7);
        assert!((h.total() - 4.0).abs() < 1e-12);
        assert_eq!(h.quantile(1.0), 3.7);
    }

    #[test]
    fn merge_is_commutative() {
        let mut a = AbsHistogram::new(32);
        a.grow(2.0);
        a.add_abs(&[0.5, 1.5, -2.0]);
        let mut b = AbsHistogram::new(32);
        b.grow(5.0);
        b.add_abs(&[4.0, 0.1]);
        let mut ab = a.clone();
        ab.merge(&b);
        let mut ba = b.clone();
        ba.merge(&a);
        assert_eq!(ab, ba);
    }

    #[test]
    fn zero_only_history_survives_growth() {
        let mut h = AbsHistogram::new(8);
        h.add_abs(&[0.0, 0.0]);
        h.grow(2.0);
        h.add_abs(&[2.0]);
        assert_eq!(h.counts()[0], 2.0);
        assert_eq!(h.counts()[7], 1.0);
    }
}
