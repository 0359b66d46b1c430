//! Symmetric uniform fake quantization.
//!
//! A [`QuantSpec`] fixes a bit width `b` and a positive scale `s`; the
//! representable set is `{-qmax·s, …, -s, 0, s, …, qmax·s}` with
//! `qmax = 2^(b-1) - 1` (the extra negative code is unused, so the zero point
//! is exactly zero). Values are rounded half-to-even.

use serde::{Deserialize, Serialize};

use crate::error::{QtError, Result};
use crate::tensor::Tensor;

pub const MIN_BITS: u8 = 2;
pub const MAX_BITS: u8 = 16;

/// Bit width and scale of a per-tensor symmetric quantizer.
///
/// Serialized as `{"bits": int, "scale": float}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSpec", into = "RawSpec")]
pub struct QuantSpec {
    bits: u8,
    scale: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSpec {
    bits: i64,
    scale: f64,
}

impl TryFrom<RawSpec> for QuantSpec {
    type Error = QtError;

    fn try_from(raw: RawSpec) -> Result<Self> {
        let bits = u8::try_from(raw.bits)
            .map_err(|_| QtError::domain(format!("bit width {} out of range", raw.bits)))?;
        QuantSpec::new(bits, raw.scale)
    }
}

impl From<QuantSpec> for RawSpec {
    fn from(s: QuantSpec) -> Self {
        RawSpec {
            bits: s.bits as i64,
            scale: s.scale,
        }
    }
}

impl QuantSpec {
    pub fn new(bits: u8, scale: f64) -> Result<Self> {
        check_bits(bits)?;
        if !(scale.is_finite() && scale > 0.0) {
            return Err(QtError::domain(format!("scale must be positive and finite, got {scale}")));
        }
        Ok(QuantSpec { bits, scale })
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// Largest code magnitude, `2^(bits-1) - 1`.
    pub fn qmax(&self) -> i32 {
        qmax(self.bits)
    }

    /// Largest representable magnitude, `qmax · scale`.
    pub fn clip_bound(&self) -> f64 {
        self.qmax() as f64 * self.scale
    }

    /// Integer code of `x`: `clamp(round_half_even(x / scale), -qmax, qmax)`.
    #[inline]
    pub fn code(&self, x: f64) -> i32 {
        clamped_round(x / self.scale, self.qmax() as f64) as i32
    }

    #[inline]
    pub fn dequantize_code(&self, code: i32) -> f64 {
        code as f64 * self.scale
    }

    /// Quantize then dequantize one value.
    #[inline]
    pub fn fake_quant_value(&self, x: f64) -> f64 {
        clamped_round(x / self.scale, self.qmax() as f64) * self.scale
    }
}

/// `clamp(round_half_even(v), -q, q)`. Clamping first keeps `|v|` far below
/// 2^51, where adding and subtracting 1.5·2^52 rounds half-to-even exactly.
#[inline]
fn clamped_round(v: f64, q: f64) -> f64 {
    const MAGIC: f64 = 6_755_399_441_055_744.0;
    let c = v.clamp(-q - 1.0, q + 1.0);
    ((c + MAGIC) - MAGIC).clamp(-q, q)
}

pub fn qmax(bits: u8) -> i32 {
    (1i32 << (bits - 1)) - 1
}

fn check_bits(bits: u8) -> Result<()> {
    if !(MIN_BITS..=MAX_BITS).contains(&bits) {
        return Err(QtError::domain(format!(
            "bit width {bits} outside [{MIN_BITS}, {MAX_BITS}]"
        )));
    }
    Ok(())
}

/// Spec whose clip bound is the range `r`: `scale = r / qmax`.
pub fn scale_from_range(r: f64, bits: u8) -> Result<QuantSpec> {
    check_bits(bits)?;
    if !(r.is_finite() && r > 0.0) {
        return Err(QtError::domain(format!("quantization range must be positive and finite, got {r}")));
    }
    QuantSpec::new(bits, r / qmax(bits) as f64)
}

/// `clamp(round_half_even(t / scale), -qmax, qmax) · scale`, elementwise.
pub fn fake_quant(t: &Tensor, spec: &QuantSpec) -> Tensor {
    Tensor::from_parts(
        t.shape().to_vec(),
        t.data().iter().map(|&v| spec.fake_quant_value(v)).collect(),
    )
}

/// Integer codes plus the spec needed to reconstruct them.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    codes: Vec<i32>,
    spec: QuantSpec,
    shape: Vec<usize>,
}

impl QuantizedTensor {
    pub fn quantize(t: &Tensor, spec: QuantSpec) -> Self {
        QuantizedTensor {
            codes: t.data().iter().map(|&v| spec.code(v)).collect(),
            spec,
            shape: t.shape().to_vec(),
        }
    }

    pub fn codes(&self) -> &[i32] {
        &self.codes
    }

    pub fn spec(&self) -> QuantSpec {
        self.spec
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dequantize(&self) -> Tensor {
        Tensor::from_parts(
            self.shape.clone(),
            self.codes.iter().map(|&c| self.spec.dequantize_code(c)).collect(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn clamped_round_matches_std(v in -1e6f64..1e6, bits in 2u8..=16) {
            let q = qmax(bits) as f64;
            prop_assert_eq!(clamped_round(v, q), v.round_ties_even().clamp(-q, q));
            let half = v.trunc() + 0.5;
            prop_assert_eq!(clamped_round(half, q), half.round_ties_even().clamp(-q, q));
        }
    }

    #[test]
    fn scale_from_range_examples() {
        assert_eq!(scale_from_range(127.0, 8).unwrap().scale(), 1.0);
        assert_eq!(scale_from_range(1.0, 7).unwrap().scale(), 1.0 / 63.0);
        assert!(scale_from_range(0.0, 8).is_err());
        assert!(scale_from_range(-1.0, 8).is_err());
        assert!(scale_from_range(f64::NAN, 8).is_err());
        assert!(scale_from_range(1.0, 1).is_err());
        assert!(scale_from_range(1.0, 17).is_err());
    }

    #[test]
    fn fake_quant_examples() {
        let spec = QuantSpec::new(8, 1.0).unwrap();
        let z = Tensor::zeros(&[3, 2]);
        assert_eq!(fake_quant(&z, &spec), z);

        let grid = Tensor::vector(vec![-3.0, 0.0, 5.0, 127.0, -127.0]).unwrap();
        assert_eq!(fake_quant(&grid, &spec), grid);

        let big = Tensor::vector(vec![200.0]).unwrap();
        assert_eq!(fake_quant(&big, &spec).data(), &[127.0]);
    }

    #[test]
    fn rounding_is_half_to_even() {
        let spec = QuantSpec::new(8, 1.0).unwrap();
        assert_eq!(spec.code(0.5), 0);
        assert_eq!(spec.code(1.5), 2);
        assert_eq!(spec.code(2.5), 2);
        assert_eq!(spec.code(-2.5), -2);
    }

    #[test]
    fn random_range_error_is_half_step() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::vector((0..500).map(|_| rng.random_range(-4.0..4.0)).collect()).unwrap();
        let spec = scale_from_range(x.max_abs().unwrap(), 8).unwrap();
        let q = QuantizedTensor::quantize(&x, spec);
        assert!(q.codes().iter().all(|c| c.abs() <= spec.qmax()));
        for (a, b) in x.data().iter().zip(q.dequantize().data()) {
            assert!((a - b).abs() <= spec.scale() / 2.0 * (1.0 + 1e-12));
        }
    }

    #[test]
    fn spec_json_round_trip_and_validation() {
        let s = QuantSpec::new(7, 0.25).unwrap();
        let j = serde_json::to_string(&s).unwrap();
        assert_eq!(j, r#"{"bits":7,"scale":0.25}"#);
        assert_eq!(serde_json::from_str::<QuantSpec>(&j).unwrap(), s);
        assert!(serde_json::from_str::<QuantSpec>(r#"{"bits":40,"scale":1}"#).is_err());
        assert!(serde_json::from_str::<QuantSpec>(r#"{"bits":8,"scale":-1}"#).is_err());
        assert!(serde_json::from_str::<QuantSpec>(r#"{"bits":-8,"scale":1}"#).is_err());
    }

    fn spec_strategy() -> impl Strategy<Value = QuantSpec> {
        (2u8..=16, 1e-4f64..10.0).prop_map(|(b, s)| QuantSpec::new(b, s).unwrap())
    }

    proptest! {
        #[test]
        fn idempotent(spec in spec_strategy(), x in -1e4f64..1e4) {
            let once = spec.fake_quant_value(x);
            prop_assert_eq!(spec.fake_quant_value(once), once);
        }

        #[test]
        fn odd_symmetric(spec in spec_strategy(), x in -1e4f64..1e4) {
            prop_assert_eq!(spec.fake_quant_value(-x), -spec.fake_quant_value(x));
        }

        #[test]
        fn monotone(spec in spec_strategy(), a in -1e4f64..1e4, b in -1e4f64..1e4) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(spec.fake_quant_value(lo) <= spec.fake_quant_value(hi));
        }

        #[test]
        fn bounded_error_inside_range(spec in spec_strategy(), u in -1.0f64..1.0) {
            let x = u * spec.clip_bound();
            let err = (spec.fake_quant_value(x) - x).abs();
            prop_assert!(err <= spec.scale() / 2.0 * (1.0 + 1e-12));
        }
    }
}
