#![no_main]

use crysdiff::hypergraph::Hypergraph;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(h) = Hypergraph::from_json(text) {
        let back = Hypergraph::from_json(&h.to_json()).expect("re-parse");
        assert_eq!(back.hyperedges(), h.hyperedges());
        assert_eq!(h.degrees().len(), h.num_nodes());
    }
});
