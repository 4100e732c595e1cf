//! Counter-derived random streams.
//!
//! Every random draw in the crate comes from a `ChaCha8Rng` whose seed is a
//! pure function of a user seed and a tuple of counters (agent, round, ...),
//! so results never depend on scheduling or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Fold a list of counters into a base seed.
pub fn derive_seed(seed: u64, counters: &[u64]) -> u64 {
    counters
        .iter()
        .fold(mix64(seed), |acc, &c| mix64(acc ^ mix64(c)))
}

pub fn stream(seed: u64, counters: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, counters))
}

// Stream tags keep sub-streams of the same seed apart.
pub(crate) const TAG_TOPOLOGY: u64 = 0x746f_706f;
pub(crate) const TAG_DATA: u64 = 0x6461_7461;
pub(crate) const TAG_PARTITION: u64 = 0x7061_7274;
pub(crate) const TAG_INIT: u64 = 0x696e_6974;
pub(crate) const TAG_ATTACK: u64 = 0x6174_7461;
pub(crate) const TAG_NOISE: u64 = 0x6e6f_6973;
pub(crate) const TAG_SUBSET: u64 = 0x7375_6273;
