//! Deterministic seed derivation.
//!
//! Every random stream in a campaign is derived from the master seed plus a
//! path of tags (wave index, purpose, cell index, ...), so any piece of work
//! can be reproduced in isolation and in any order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `tags` into `seed`, producing an independent-looking child seed.
pub fn derive(seed: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(seed), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Purpose tags used when deriving per-wave streams.
pub mod tag {
    pub const DESIGN: u64 = 1;
    pub const DIAGNOSTIC: u64 = 2;
    pub const SPACE: u64 = 3;
    pub const PROJECTION: u64 = 4;
    pub const HARVEST: u64 = 5;
    pub const OBSERVATION: u64 = 6;
    pub const TERMINATION: u64 = 7;
}
