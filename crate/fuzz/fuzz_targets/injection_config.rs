#![no_main]

use libfuzzer_sys::fuzz_target;
use segforge::dli::InjectionConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(config) = InjectionConfig::from_json(text) {
        assert!((0.0..=1.0).contains(&config.p_poisson));
    }
});
