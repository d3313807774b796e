//! Seed derivation for independent, reproducible random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Named streams so that consumers of randomness never share a generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Line = 2,
    Thompson = 3,
    Oracle = 4,
    Truth = 5,
    Disturbance = 6,
    Baseline = 7,
    Scenario = 8,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic sub-seed for `(seed, stream, counter)`.
pub fn derive_seed(seed: u64, stream: Stream, counter: u64) -> u64 {
    splitmix(splitmix(seed ^ splitmix(stream as u64)) ^ counter)
}

pub fn stream_rng(seed: u64, stream: Stream, counter: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream, counter))
}
