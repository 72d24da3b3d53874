//! Seeded random streams: xoshiro256** seeded through SplitMix64.

use rand::{RngCore, SeedableRng};
use rand_xoshiro::{SplitMix64, Xoshiro256StarStar};

pub type HagRng = Xoshiro256StarStar;

/// `Xoshiro256StarStar::seed_from_u64` expands the seed with SplitMix64.
pub fn seeded(seed: u64) -> HagRng {
    HagRng::seed_from_u64(seed)
}

/// Independent stream derived from a base seed and a tag.
pub fn substream(seed: u64, tag: u64) -> HagRng {
    let mut mix = SplitMix64::seed_from_u64(seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    seeded(mix.next_u64())
}
