//! Seeded randomness shared by initialization, sampling and partitioning.

use rand::SeedableRng;
use rand_xoshiro::SplitMix64;

pub type Rng = SplitMix64;

/// Derives an independent stream from a base seed and a stream label, so
/// that e.g. device 3's batch order does not depend on how many draws the
/// partitioner consumed.
pub fn stream(seed: u64, label: u64) -> Rng {
    let mut z = seed ^ label.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    // one splitmix64 finalizer round
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    Rng::seed_from_u64(z)
}

pub mod streams {
    pub const INIT_CLIENT: u64 = 1;
    pub const INIT_SERVER: u64 = 2;
    pub const PARTITION: u64 = 3;
    pub const SUBSET: u64 = 4;
    pub const SYNTH: u64 = 5;
    pub const TOPK: u64 = 6;
    /// Device streams are `DEVICE_BASE + device id`.
    pub const DEVICE_BASE: u64 = 1 << 32;
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn streams_are_deterministic_and_distinct() {
        let a: Vec<u64> = (0..4).map(|_| stream(7, 1).next_u64()).collect();
        assert!(a.windows(2).all(|w| w[0] == w[1]));
        assert_ne!(stream(7, 1).next_u64(), stream(7, 2).next_u64());
        assert_ne!(stream(7, 1).next_u64(), stream(8, 1).next_u64());
    }
}
