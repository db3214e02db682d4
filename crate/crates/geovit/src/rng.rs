//! Deterministic seed derivation. Every random draw in the crate comes from
//! a ChaCha8 stream seeded through `derive_seed`, so any stage (one sample,
//! one step, one init) can be reproduced in isolation.

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a base seed, a stream tag, and an index into an independent seed.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(base) ^ stream) ^ index)
}

/// Stream tags, one per consumer of randomness.
pub mod streams {
    pub const INIT: u64 = 1;
    pub const SAMPLE: u64 = 2;
    pub const STEP: u64 = 3;
    pub const EPOCH: u64 = 4;
    pub const GRADCHECK: u64 = 5;
}
