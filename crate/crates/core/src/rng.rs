//! Seed derivation and RNG construction.
//!
//! Every stochastic component draws from a `ChaCha8Rng` whose seed is derived
//! from a base seed and a path of stream identifiers (sweep point, scene,
//! CAV, ...). Streams are therefore independent of evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a base seed with a list of stream identifiers.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix(base), |acc, &p| splitmix(acc ^ splitmix(p)))
}

pub fn rng_from(base: u64, parts: &[u64]) -> SimRng {
    SimRng::seed_from_u64(derive_seed(base, parts))
}

/// Stream tags so that unrelated draws never share a seed path.
pub mod stream {
    pub const SCENE: u64 = 0x5C;
    pub const RENDER: u64 = 0xE7;
    pub const CHANNEL: u64 = 0xC4;
    pub const INIT: u64 = 0x17;
    pub const BATCH: u64 = 0xBA;
    pub const MODALITY: u64 = 0x3D;
    pub const PHY: u64 = 0x9F;
}
