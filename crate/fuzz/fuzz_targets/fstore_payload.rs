#![no_main]

use aesprobe::store::FeatureMatrix;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(m) = FeatureMatrix::from_bytes(data) {
        assert_eq!(m.to_bytes(), data);
    }
});
