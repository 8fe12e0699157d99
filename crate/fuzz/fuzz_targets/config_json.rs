#![no_main]

use crysdiff::hypergraph::HypergraphSpec;
use crysdiff::sampler::SampleConfig;
use crysdiff::symmetry::SuiteConfig;
use crysdiff::trainer::TrainConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(c) = serde_json::from_str::<TrainConfig>(text) {
        let _ = c.validate();
    }
    if let Ok(c) = serde_json::from_str::<SampleConfig>(text) {
        let _ = c.validate();
    }
    let _ = serde_json::from_str::<HypergraphSpec>(text);
    let _ = serde_json::from_str::<SuiteConfig>(text);
});
