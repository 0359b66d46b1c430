#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(log) = qtlab::train::parse_train_log(data) {
        let again = qtlab::train::parse_train_log(log.to_ndjson().as_bytes()).unwrap();
        assert_eq!(again, log);
    }
});
