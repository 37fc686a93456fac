//! Deterministic seed derivation so that every random draw is addressable
//! by (base seed, purpose, index).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn mix(seed: u64, salt: u64, index: u64) -> u64 {
    splitmix64(splitmix64(seed ^ splitmix64(salt)) ^ index)
}

pub fn rng(seed: u64, salt: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, salt, index))
}

pub mod salt {
    pub const SAMPLE: u64 = 1;
    pub const SPARSE: u64 = 2;
    pub const BATCH: u64 = 3;
    pub const AUGMENT: u64 = 4;
    pub const PROMPTS: u64 = 5;
    pub const PCL: u64 = 6;
    pub const INIT: u64 = 7;
    pub const EVAL: u64 = 8;
    pub const DROPOUT: u64 = 9;
}
