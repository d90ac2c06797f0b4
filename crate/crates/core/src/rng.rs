//! Seeding.
//!
//! Every random stream in the crate is a [`ChaCha8Rng`] seeded from a `u64`.
//! ChaCha8 is a fully specified, platform-independent generator, so a seed
//! reproduces the same stream everywhere. Child streams (per rollout, per
//! record, per iteration) are derived with SplitMix64 so that stream `i` of a
//! master seed never depends on how many sibling streams are requested.

use rand::SeedableRng;
pub use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// One SplitMix64 output step applied to `x`.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of the `index`-th child stream of `master`.
pub fn child_seed(master: u64, index: u64) -> u64 {
    splitmix64(splitmix64(master) ^ splitmix64(index.wrapping_add(0xD1B5_4A32_D192_ED03)))
}

pub fn rng_from_seed(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

pub fn child_rng(master: u64, index: u64) -> Rng {
    rng_from_seed(child_seed(master, index))
}

/// Stream indices under the experiment master seed.
pub mod streams {
    pub const WORLD: u64 = 1;
    pub const INTERACTIONS: u64 = 2;
    pub const POOLS: u64 = 3;
    pub const TEST_POOLS: u64 = 4;
    pub const EVALUATOR_INIT: u64 = 5;
    pub const EVALUATOR_SHUFFLE: u64 = 6;
    pub const GENERATOR_INIT: u64 = 7;
    pub const GRPO: u64 = 8;
    pub const RERANK: u64 = 9;
}
