#![no_main]

use libfuzzer_sys::fuzz_target;
use segforge::CiwTable;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(table) = CiwTable::from_json(text) {
        for (_, &w) in table.weights() {
            assert!(w > 0.0 && w <= 1.0);
        }
    }
});
