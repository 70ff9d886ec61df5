//! Deterministic RNG streams.
//!
//! Every stochastic component draws from a [`ChaCha8Rng`] whose seed is
//! derived from the master seed plus a stream tag and an index, so results
//! never depend on thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream tags. Values are arbitrary but fixed forever for reproducibility.
pub mod stream {
    pub const INFRASTRUCTURE: u64 = 0x01;
    pub const USER_LAYOUT: u64 = 0x02;
    pub const USER_DATA: u64 = 0x03;
    pub const SERVER_DATA: u64 = 0x04;
    pub const PILOTS: u64 = 0x05;
    pub const MODEL_INIT: u64 = 0x10;
    pub const TRAINING: u64 = 0x11;
    pub const DISTILL: u64 = 0x12;
    pub const AGENT: u64 = 0x20;
    pub const GAME: u64 = 0x21;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(master: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(master) ^ stream) ^ index)
}

pub fn rng_for(master: u64, stream: u64, index: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, stream, index))
}
