#![no_main]

use libfuzzer_sys::fuzz_target;
use segforge::io::{decode_image, encode_image};

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = decode_image(data, "fuzz") {
        let bytes = encode_image(&img).expect("decoded image encodes");
        assert_eq!(decode_image(&bytes, "fuzz").expect("round trip"), img);
    }
});
