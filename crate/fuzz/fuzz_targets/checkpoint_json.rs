#![no_main]

use crysdiff::checkpoint::Checkpoint;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(ck) = Checkpoint::from_json(text) {
        if let Ok(json) = ck.to_json() {
            assert_eq!(Checkpoint::from_json(&json).expect("re-parse"), ck);
        }
    }
});
