#![no_main]
use libfuzzer_sys::fuzz_target;

// Input: config JSON on the first line, one `key=value` override per
// following line.
fuzz_target!(|data: &[u8]| {
    let Ok(s) = std::str::from_utf8(data) else { return };
    let mut lines = s.lines();
    let config = lines.next().unwrap_or("");
    let overrides: Vec<String> = lines.map(str::to_string).collect();
    if let Ok(c) = qtlab::pipeline::parse_experiment_config(config.as_bytes(), &overrides) {
        assert!(c.validate().is_ok());
    }
});
