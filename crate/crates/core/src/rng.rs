//! Seed derivation. Every random stream in the pipeline is a ChaCha8 generator
//! keyed by a mix of the global seed and the coordinates of the work item, so
//! output never depends on scheduling or on how many workers ran.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Hashes a seed together with a path of stream coordinates.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix64(seed), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn stream(seed: u64, path: &[u64]) -> Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, path))
}

/// Stream tags keep independent consumers of one seed apart.
pub mod tag {
    pub const CORPUS: u64 = 0x636f_7270;
    pub const GENERATE: u64 = 0x6765_6e65;
    pub const BATCH: u64 = 0x6261_7463;
    pub const DROPOUT: u64 = 0x6472_6f70;
    pub const INIT: u64 = 0x696e_6974;
    pub const SYNTH: u64 = 0x7379_6e74;
}
