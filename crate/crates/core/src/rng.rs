//! Seed derivation and generator construction.
//!
//! Every random stream in the crate is a ChaCha8 generator keyed by a seed
//! derived from a master seed and a path of integer tags. Changing
//! [`STREAM_VERSION`] invalidates all previously generated artifacts.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const STREAM_VERSION: u64 = 1;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from `master` and an ordered list of tags.
pub fn derive_seed(master: u64, tags: &[u64]) -> u64 {
    let mut h = splitmix64(master ^ STREAM_VERSION.rotate_left(56));
    for &t in tags {
        h = splitmix64(h ^ splitmix64(t));
    }
    h
}

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stream tags used across the crate, kept in one place so no two
/// consumers share a stream by accident.
pub mod tags {
    pub const VARIATION: u64 = 1;
    pub const TRAIN_SET: u64 = 2;
    pub const TEST_BASE: u64 = 3;
    pub const NOISE: u64 = 4;
    pub const FOLDS: u64 = 5;
    pub const INIT: u64 = 6;
    pub const SHUFFLE: u64 = 7;
    pub const DROPOUT: u64 = 8;
    pub const TSNE: u64 = 9;
    pub const SUBSAMPLE: u64 = 10;
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn derivation_is_stable_and_tag_sensitive() {
        assert_eq!(derive_seed(7, &[1, 2]), derive_seed(7, &[1, 2]));
        assert_ne!(derive_seed(7, &[1, 2]), derive_seed(7, &[2, 1]));
        assert_ne!(derive_seed(7, &[1]), derive_seed(8, &[1]));
        let a: u64 = rng_from_seed(3).random();
        let b: u64 = rng_from_seed(3).random();
        assert_eq!(a, b);
    }
}
