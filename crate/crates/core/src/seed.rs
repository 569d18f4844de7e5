//! Named-seed derivation. Every random stream in the crate is a ChaCha8
//! generator keyed by a base seed mixed with a few integer tags.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive(base: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(splitmix64(base), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn rng(base: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(base, tags))
}

/// Stable tags for the different consumers of a run seed.
pub mod stream {
    pub const CORPUS_REFERENCE: u64 = 1;
    pub const CORPUS_DISTORTION: u64 = 2;
    pub const CORPUS_JITTER: u64 = 3;
    pub const DIFFUSION_INIT: u64 = 10;
    pub const DIFFUSION_TRAIN: u64 = 11;
    pub const RESTORE: u64 = 12;
    pub const IQA_INIT: u64 = 20;
    pub const IQA_TRAIN: u64 = 21;
    pub const SPLIT: u64 = 30;
    pub const SELECTION: u64 = 31;
}
