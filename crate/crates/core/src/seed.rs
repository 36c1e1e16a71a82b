//! Hierarchical seed derivation.
//!
//! One master seed fans out into independent streams (per client, per sample,
//! per round) by hashing a path of integer labels. A stream depends only on its
//! own path, so adding clients never perturbs the data of existing ones.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream labels. Values are part of the on-disk reproducibility contract.
pub mod stream {
    pub const CLIENT: u64 = 0x01;
    pub const SAMPLE: u64 = 0x02;
    pub const ROUND: u64 = 0x03;
    pub const EPOCH: u64 = 0x04;
    pub const TEST_SET: u64 = 0x05;
    pub const PRETRAIN: u64 = 0x06;
    pub const INIT: u64 = 0x07;
    pub const WEATHER: u64 = 0x08;
    pub const ANNOTATION: u64 = 0x09;
    pub const MODALITY: u64 = 0x0a;
    pub const SCENE: u64 = 0x0b;
    pub const RADAR_NOISE: u64 = 0x0c;
    pub const TEMPLATE: u64 = 0x0d;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from `parent` and a path of labels.
pub fn derive(parent: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(parent), |acc, &label| splitmix64(acc ^ splitmix64(label)))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
