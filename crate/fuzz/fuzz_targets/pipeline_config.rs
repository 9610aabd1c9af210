#![no_main]

use libfuzzer_sys::fuzz_target;
use segforge::augment::PipelineConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(config) = PipelineConfig::from_json(text) {
        for spec in &config.transforms {
            let _ = spec.tag();
        }
        let _ = PipelineConfig::from_json(&config.to_json());
    }
});
