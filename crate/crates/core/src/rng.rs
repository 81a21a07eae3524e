//! Seed derivation. Every random stream is a pure function of the global seed
//! and a tuple of indices, so results do not depend on iteration order or
//! parallel scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(splitmix(seed), |acc, &p| splitmix(acc ^ splitmix(p)))
}

pub fn stream(seed: u64, parts: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(seed, parts))
}

/// Domain tags separating otherwise identical index tuples.
pub mod tag {
    pub const INIT: u64 = 1;
    pub const AUGMENT: u64 = 2;
    pub const GATE: u64 = 3;
    pub const SHUFFLE: u64 = 4;
    pub const SYNTHETIC: u64 = 5;
}
