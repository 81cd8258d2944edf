#![no_main]

use aesprobe::tables::parse_id_list;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = parse_id_list(text, "fuzz");
    }
});
