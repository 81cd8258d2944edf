#![no_main]

use aesprobe::tables::parse_range;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok((lo, hi)) = parse_range(text) {
            assert!(lo < hi);
        }
    }
});
