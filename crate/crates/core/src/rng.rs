//! Deterministic random-stream derivation.
//!
//! Every random quantity in the crate is drawn from a ChaCha stream addressed
//! by `(master seed, domain, index)`, so results depend only on the seed and
//! the logical position of the work item, never on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream domains used across the crate.
pub mod domain {
    pub const FEATURES: u64 = 0x01;
    pub const ROTATION: u64 = 0x02;
    pub const MOMENTS: u64 = 0x03;
    pub const REPLICATE: u64 = 0x04;
    pub const TEST_SET: u64 = 0x05;
    pub const LIPSCHITZ: u64 = 0x06;
    pub const SUBSAMPLE: u64 = 0x07;
    pub const DATA: u64 = 0x08;
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream for work item `index` of `domain` under `master`.
pub fn substream(master: u64, domain: u64, index: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(master ^ splitmix64(domain)));
    rng.set_stream(index);
    rng
}

/// Derived 64-bit seed, for components that take a plain seed.
pub fn derive_seed(master: u64, domain: u64, index: u64) -> u64 {
    splitmix64(splitmix64(master ^ splitmix64(domain)) ^ splitmix64(index.wrapping_add(1)))
}
