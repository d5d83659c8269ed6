//! Counter-based seed derivation.
//!
//! Every random stream in a run is keyed by the master seed plus a short
//! tuple of counters, so draws never depend on how many values some other
//! stream consumed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream labels. Distinct labels keep derived seeds disjoint.
pub mod label {
    pub const CORPUS: u64 = 1;
    pub const RULE: u64 = 2;
    pub const CORRUPT: u64 = 3;
    pub const BATCH: u64 = 4;
    pub const CHANNEL: u64 = 5;
    pub const SNR: u64 = 6;
    pub const INIT: u64 = 7;
    pub const EVAL: u64 = 8;
    pub const EMBED: u64 = 9;
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds `parts` into `seed`.
pub fn derive(seed: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(splitmix(seed), |acc, &p| splitmix(acc ^ splitmix(p)))
}

pub fn rng(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, parts))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_and_value_matter() {
        assert_ne!(derive(1, &[2, 3]), derive(1, &[3, 2]));
        assert_ne!(derive(1, &[2]), derive(2, &[2]));
        assert_eq!(derive(7, &[1, 2]), derive(7, &[1, 2]));
    }
}
