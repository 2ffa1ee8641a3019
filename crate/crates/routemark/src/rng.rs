//! Deterministic stream derivation: every random draw in the pipeline
//! comes from a ChaCha stream keyed by (master seed, purpose tag, index),
//! so runs are reproducible and resumable without serializing RNG state.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const TAG_BACKBONE_INIT: u64 = 1;
pub const TAG_BANK_INIT: u64 = 2;
pub const TAG_EXTRACTOR_INIT: u64 = 3;
pub const TAG_KEY: u64 = 4;
pub const TAG_DATA: u64 = 5;
pub const TAG_AUG: u64 = 6;
pub const TAG_EVAL: u64 = 7;
pub const TAG_FEATURES: u64 = 8;
pub const TAG_ATTACK: u64 = 9;
pub const TAG_PROBE: u64 = 10;

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Collapses (master, tag, index) into a stream seed.
pub fn derive_seed(master: u64, tag: u64, index: u64) -> u64 {
    splitmix64(splitmix64(master ^ splitmix64(tag)) ^ index)
}

pub fn stream(master: u64, tag: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, tag, index))
}
