#![no_main]

use aesprobe::probing::AttributeTable;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = AttributeTable::from_csv(text, "fuzz");
    }
});
