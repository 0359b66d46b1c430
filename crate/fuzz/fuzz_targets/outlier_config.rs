#![no_main]
use libfuzzer_sys::fuzz_target;
use qtlab::outlier::OutlierLossConfig;

fuzz_target!(|data: &[u8]| {
    if let Ok(c) = serde_json::from_slice::<OutlierLossConfig>(data) {
        let back = serde_json::to_vec(&c).unwrap();
        assert_eq!(serde_json::from_slice::<OutlierLossConfig>(&back).unwrap(), c);
    }
});
