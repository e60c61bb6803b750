//! Seed derivation. Every random draw in the simulator comes from a
//! `ChaCha8Rng` seeded through [`derive_seed`], so a run is a pure function
//! of its configured seeds.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a base seed with a sequence of tags into an independent stream seed.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(base), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn rng_for(base: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, tags))
}

/// Stream tags, kept distinct so derived streams never collide by accident.
pub(crate) mod tag {
    pub const SELECT: u64 = 1;
    pub const CLIENT: u64 = 2;
    pub const EPISODE: u64 = 3;
    pub const BANK: u64 = 4;
    pub const SHIFT: u64 = 5;
    pub const EXAMPLE: u64 = 6;
    pub const TRIAL: u64 = 7;
    pub const SHUFFLE: u64 = 8;
    pub const INIT: u64 = 9;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_are_stable_and_distinct() {
        assert_eq!(derive_seed(7, &[1, 2]), derive_seed(7, &[1, 2]));
        assert_ne!(derive_seed(7, &[1, 2]), derive_seed(7, &[2, 1]));
        assert_ne!(derive_seed(7, &[1]), derive_seed(8, &[1]));
    }
}
