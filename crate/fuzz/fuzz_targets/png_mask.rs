#![no_main]

use libfuzzer_sys::fuzz_target;
use segforge::io::{decode_mask, encode_mask};

fuzz_target!(|data: &[u8]| {
    if let Ok(mask) = decode_mask(data, "fuzz", 8) {
        assert!(mask.max_label() <= 8);
        let bytes = encode_mask(&mask).expect("decoded mask encodes");
        assert_eq!(decode_mask(&bytes, "fuzz", 8).expect("round trip"), mask);
    }
});
