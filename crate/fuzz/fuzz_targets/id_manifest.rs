#![no_main]

use libfuzzer_sys::fuzz_target;
use segforge::io::parse_manifest;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    for id in parse_manifest(text) {
        assert!(!id.is_empty() && !id.starts_with('#'));
        assert_eq!(id.trim(), id);
    }
});
