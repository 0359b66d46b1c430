#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(m) = qtlab::checkpoint::parse_manifest(data) {
        for w in &m.weights {
            assert!(!w.file.contains('/') && !w.file.contains('\\'));
        }
    }
});
