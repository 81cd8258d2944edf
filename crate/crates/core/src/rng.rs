//! Seeded randomness.
//!
//! Every random draw in the crate comes from ChaCha8 keyed by the run seed,
//! with the 64-bit stream id selecting an independent sequence (a bootstrap
//! resample index, or the FNV-1a hash of a user id). ChaCha is counter-based
//! and its output is specified bit-for-bit, so draws do not depend on
//! platform or on the order in which work is scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

pub fn stream_rng(seed: u64, stream: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// 64-bit FNV-1a.
pub fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

pub fn keyed_rng(seed: u64, key: &str) -> StreamRng {
    stream_rng(seed, fnv1a(key))
}
