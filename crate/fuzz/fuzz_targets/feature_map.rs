#![no_main]

use libfuzzer_sys::fuzz_target;
use segforge::protohead::FeatureMap;

// Decoding is exact-length, so a successful decode must re-encode to the input.
fuzz_target!(|data: &[u8]| {
    if let Ok(map) = FeatureMap::decode(data) {
        assert_eq!(map.encode(), data);
    }
});
