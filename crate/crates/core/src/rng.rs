//! Seed derivation. Every random stream in the crate is a ChaCha8 generator
//! keyed by a root seed plus a path of stream identifiers, so that concurrent
//! work never shares generator state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(root: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(root), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn stream(root: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, path))
}

// stream tags
pub(crate) const TAG_EMBED: u64 = 1;
pub(crate) const TAG_LAYER: u64 = 2;
pub(crate) const TAG_MODULE: u64 = 3;
pub(crate) const TAG_HEAD: u64 = 4;
pub(crate) const TAG_PARTITION: u64 = 5;
pub(crate) const TAG_SAMPLER: u64 = 6;
pub(crate) const TAG_NOISE: u64 = 7;
pub(crate) const TAG_EVAL: u64 = 8;
pub(crate) const TAG_DATA: u64 = 9;
pub(crate) const TAG_SCAN: u64 = 10;
