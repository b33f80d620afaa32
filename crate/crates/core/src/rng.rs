//! Seed derivation.
//!
//! Every random decision in the crate draws from a ChaCha stream derived
//! from one root seed and a stream name, so that data generation, weight
//! initialization, batch order and augmentation can be re-seeded independently.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a over bytes, stable across platforms and compiler versions.
pub fn hash_bytes(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Seed for a named sub-stream of `seed`.
pub fn derive_seed(seed: u64, stream: &str) -> u64 {
    mix64(seed ^ mix64(hash_bytes(stream.as_bytes())))
}

/// Seed for the `index`-th item of a stream (e.g. one generated sample).
pub fn indexed_seed(seed: u64, index: u64) -> u64 {
    mix64(seed ^ mix64(index.wrapping_add(0x5851_F42D_4C95_7F2D)))
}

pub fn rng_from(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn stream(seed: u64, name: &str) -> Rng {
    rng_from(derive_seed(seed, name))
}
