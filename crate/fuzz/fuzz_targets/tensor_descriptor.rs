#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(desc) = qtlab::io::parse_descriptor(data) {
        assert!(desc.byte_len().is_ok());
    }
});
