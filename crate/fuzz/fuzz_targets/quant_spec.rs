#![no_main]
use libfuzzer_sys::fuzz_target;
use qtlab::QuantSpec;

fuzz_target!(|data: &[u8]| {
    if let Ok(s) = serde_json::from_slice::<QuantSpec>(data) {
        assert!(s.scale() > 0.0 && s.scale().is_finite());
        let x = s.fake_quant_value(1.0);
        assert!(x.abs() <= s.clip_bound());
    }
});
