//! Deterministic seed derivation.
//!
//! Every random stream in the crate is keyed by `(master seed, replicate
//! index, purpose tag)`. Streams never share state, so replicates can run in
//! any order or on any thread and still reproduce bit-for-bit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Generator used throughout the crate.
pub type StreamRng = ChaCha8Rng;

/// Purpose tags shared by the single-stage and sequential pipelines. Keeping
/// them identical is what makes the horizon-1 reduction exact.
pub mod purpose {
    pub const SPLIT: &str = "split";
    pub const PROPENSITY: &str = "propensity";
    pub const PSEUDO: &str = "pseudo-actions";
    pub const FOREST: &str = "forest";
    pub const MATCH_WEIGHT: &str = "match-weight";
    pub const DATA: &str = "data";
    pub const TEST: &str = "test";
    pub const MULTI_SPLIT: &str = "multi-split";
    pub const DENSITY_NOISE: &str = "density-noise";
    pub const TUNING: &str = "tuning";
    pub const REPLICATE: &str = "replicate";
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derive a child seed from `(master, replicate, purpose)`.
pub fn derive_seed(master: u64, replicate: u64, purpose: &str) -> u64 {
    let tagged = splitmix64(fnv1a(purpose));
    let rep = splitmix64(replicate ^ tagged);
    splitmix64(master ^ rep)
}

/// A fresh generator for `(master, replicate, purpose)`.
pub fn stream(master: u64, replicate: u64, purpose: &str) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(master, replicate, purpose))
}

/// Generator for a purpose under an already-derived seed (replicate 0).
pub fn substream(seed: u64, purpose: &str) -> StreamRng {
    stream(seed, 0, purpose)
}
