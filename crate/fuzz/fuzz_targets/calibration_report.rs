#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(records) = qtlab::calibration::parse_calibration_report(data) {
        for r in &records {
            assert!(r.spec().is_ok());
        }
    }
});
