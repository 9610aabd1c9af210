#![no_main]

use libfuzzer_sys::fuzz_target;
use segforge::netcost::{cost_table_csv, LayerSpecFile};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(spec) = LayerSpecFile::from_json(text) {
        if let Ok(costs) = spec.costs() {
            let _ = cost_table_csv(&costs);
        }
    }
});
