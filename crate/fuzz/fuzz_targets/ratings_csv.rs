#![no_main]

use aesprobe::piaa::RatingsTable;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = RatingsTable::from_csv(text, "fuzz", None);
        let _ = RatingsTable::from_csv(text, "fuzz", Some((1.0, 10.0)));
    }
});
