//! Deterministic derivation of independent rng streams from one root seed.
//!
//! `split_seed(root, tag, index)` hashes the triple through two rounds of the
//! SplitMix64 finalizer. Streams for different `(tag, index)` pairs are
//! unrelated, so assigning one stream per task and seed makes results
//! independent of scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn tag_hash(tag: &str) -> u64 {
    tag.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

pub fn split_seed(root: u64, tag: &str, index: u64) -> u64 {
    mix(mix(root ^ tag_hash(tag)) ^ index)
}

pub fn rng_for(root: u64, tag: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(split_seed(root, tag, index))
}
