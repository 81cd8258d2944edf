#![no_main]

use aesprobe::regression::ProbeModel;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(m) = ProbeModel::from_json(text) {
        ProbeModel::from_json(&m.to_json()).expect("re-parse");
    }
});
