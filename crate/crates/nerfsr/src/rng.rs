//! Deterministic seed derivation.
//!
//! Every random decision in the crate draws from a ChaCha stream derived
//! from the master seed, a static phase tag and the relevant loop counters,
//! never from shared mutable state. Renders chunked differently, runs resumed
//! from a checkpoint and runs on different thread counts therefore consume
//! identical random sequences.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer; the standard 64-bit avalanche mix.
fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Hashes `master` with an ordered list of tags into a sub-seed.
pub fn derive_seed(master: u64, tags: &[u64]) -> u64 {
    let mut s = splitmix64(master ^ 0x6e65_7266_7372_5f31);
    for &t in tags {
        s = splitmix64(s ^ t);
    }
    s
}

/// A seeded generator for the given phase tags.
pub fn stream(master: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, tags))
}

/// Phase tags. Tags identify the consumer, not the training strategy, so two
/// strategies that perform the same sequence of draws stay bitwise-identical.
pub mod phase {
    pub const FIELD_INIT: u64 = 1;
    pub const SR_INIT: u64 = 2;
    pub const WARMUP_BATCH: u64 = 3;
    pub const STRATIFIED: u64 = 4;
    pub const EPOCH_ORDER: u64 = 5;
    pub const PATCH: u64 = 6;
    pub const AUGMENT: u64 = 7;
    pub const DISTILL_POSES: u64 = 8;
    pub const TOY_POSES: u64 = 9;
    pub const PERCEPTUAL_INIT: u64 = 10;
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn derivation_is_stable_and_tag_sensitive() {
        let a = derive_seed(42, &[phase::PATCH, 3, 7]);
        let b = derive_seed(42, &[phase::PATCH, 3, 7]);
        assert_eq!(a, b);
        assert_ne!(a, derive_seed(42, &[phase::PATCH, 3, 8]));
        assert_ne!(a, derive_seed(42, &[phase::PATCH, 7, 3]));
        assert_ne!(a, derive_seed(43, &[phase::PATCH, 3, 7]));
    }

    #[test]
    fn streams_are_reproducible() {
        let mut r1 = stream(7, &[phase::WARMUP_BATCH, 100]);
        let mut r2 = stream(7, &[phase::WARMUP_BATCH, 100]);
        for _ in 0..16 {
            assert_eq!(r1.next_u64(), r2.next_u64());
        }
    }
}
