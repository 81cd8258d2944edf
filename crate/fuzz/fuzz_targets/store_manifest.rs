#![no_main]

use aesprobe::store::StoreManifest;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(m) = StoreManifest::from_json(text) {
        let again = StoreManifest::from_json(&m.to_json()).expect("re-parse");
        assert_eq!(again.to_json(), m.to_json());
    }
});
