#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    for width in [None, Some(3)] {
        if let Ok(ds) = crysdiff::dataset::parse_jsonl(text, width) {
            // anything accepted must survive a write/read cycle
            let again = crysdiff::dataset::parse_jsonl(&ds.to_jsonl(), Some(ds.num_species())).expect("re-parse");
            assert_eq!(again.len(), ds.len());
        }
    }
});
