//! Seed derivation. Every random stream in the crate is a ChaCha8 generator
//! keyed by a root seed and a list of stream labels, so results do not depend
//! on evaluation order or thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[inline]
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mix a root seed with stream labels.
pub fn derive(seed: u64, labels: &[u64]) -> u64 {
    labels.iter().fold(splitmix64(seed), |acc, &l| splitmix64(acc ^ splitmix64(l.wrapping_add(0x51ED))))
}

pub fn stream(seed: u64, labels: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, labels))
}

/// Stream labels used across the crate.
pub mod label {
    pub const SCENE: u64 = 1;
    pub const PLACE: u64 = 2;
    pub const AUGMENT: u64 = 3;
    pub const INIT: u64 = 4;
    pub const DROPOUT: u64 = 5;
    pub const SHUFFLE: u64 = 6;
    pub const SELECT: u64 = 7;
    pub const ATTEMPT: u64 = 8;
    pub const GRASP: u64 = 9;
    pub const EVAL: u64 = 10;
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn streams_are_distinct_and_reproducible() {
        let a = stream(7, &[1, 2]).next_u64();
        let b = stream(7, &[1, 2]).next_u64();
        let c = stream(7, &[2, 1]).next_u64();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
