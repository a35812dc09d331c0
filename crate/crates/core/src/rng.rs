//! Seed derivation. Every random stream in the crate is a ChaCha8 generator
//! seeded from an explicit root seed plus a stream tag, so no global RNG
//! state exists and parallel lanes get independent streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a root seed with a sequence of stream tags.
pub fn derive_seed(root: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(root), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn stream(root: u64, tags: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(root, tags))
}

/// Stream tags, kept in one place so distinct uses never collide.
pub mod tags {
    pub const DATA_MEANS: u64 = 1;
    pub const DATA_TRAIN: u64 = 2;
    pub const DATA_TEST: u64 = 3;
    pub const DATA_CALIBRATE: u64 = 4;
    pub const SHUFFLE: u64 = 10;
    pub const INIT: u64 = 11;
    pub const MASKS: u64 = 12;
    pub const GRADCHECK: u64 = 20;
    pub const ETF: u64 = 30;
}
