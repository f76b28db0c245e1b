//! Deterministic random streams derived from a root seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// An independent stream for `(seed, path...)`.
pub fn stream(seed: u64, path: &[u64]) -> ChaCha8Rng {
    let mut h = splitmix64(seed);
    for &p in path {
        h = splitmix64(h ^ splitmix64(p));
    }
    ChaCha8Rng::seed_from_u64(h)
}

/// Stream identifiers, so unrelated consumers never share a sequence.
pub mod tag {
    pub const MASK_BUDGET: u64 = 1;
    pub const MASKS: u64 = 2;
    pub const GAUSSIAN: u64 = 3;
    pub const SHUFFLE: u64 = 4;
    pub const CHUNK: u64 = 5;
    pub const INIT: u64 = 6;
    pub const STOCHASTIC: u64 = 7;
    pub const SYNTH: u64 = 8;
}
