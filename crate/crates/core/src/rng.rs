//! Seed derivation. Every random stream in the lab is keyed by a tuple of
//! integers hashed into a ChaCha seed, so streams for different purposes never
//! overlap and any single draw can be replayed in isolation.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags keep unrelated consumers of the same base seed apart.
pub mod stream {
    pub const INIT: u64 = 0x494e_4954;
    pub const SHUFFLE: u64 = 0x5348_5546;
    pub const SPLIT: u64 = 0x5350_4c54;
    pub const BLOBS: u64 = 0x424c_4f42;
    pub const PERTURB: u64 = 0x5045_5254;
    pub const TRAIN_PERTURB: u64 = 0x5452_4e50;
    pub const EVAL_PERTURB: u64 = 0x4556_4c50;
    pub const CALIB_PERTURB: u64 = 0x4341_4c50;
    pub const PGD: u64 = 0x5047_4400;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x243f_6a88_85a3_08d3, |acc, &p| {
        splitmix64(acc ^ splitmix64(p))
    })
}

pub fn rng_for(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(parts))
}
