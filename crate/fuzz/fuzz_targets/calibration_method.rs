#![no_main]
use libfuzzer_sys::fuzz_target;
use qtlab::calibration::CalibrationMethod;

fuzz_target!(|data: &[u8]| {
    let Ok(s) = std::str::from_utf8(data) else { return };
    if let Ok(m) = s.parse::<CalibrationMethod>() {
        assert!(m.validate().is_ok());
        assert_eq!(m.to_string().parse::<CalibrationMethod>().unwrap(), m);
    }
});
