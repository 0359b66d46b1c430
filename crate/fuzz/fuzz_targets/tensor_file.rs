#![no_main]
use libfuzzer_sys::fuzz_target;

// Input: descriptor JSON, a NUL byte, then the payload.
fuzz_target!(|data: &[u8]| {
    let Some(split) = data.iter().position(|&b| b == 0) else { return };
    let Ok(desc) = qtlab::io::parse_descriptor(&data[..split]) else { return };
    if let Ok(t) = qtlab::io::decode_payload(&desc, &data[split + 1..]) {
        assert_eq!(t.shape(), desc.shape.as_slice());
    }
});
