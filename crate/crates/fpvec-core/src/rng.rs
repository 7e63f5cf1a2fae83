//! Deterministic randomness helpers.
//!
//! Two flavors are used throughout the crate:
//!
//! * stream RNGs ([`seeded_rng`]) for sequential draws (init, shuffling,
//!   dataset generation), and
//! * a counter-based generator ([`unit_uniform`]) keyed by
//!   `(seed, tensor name, flat index)` for per-element decisions (DARE drops,
//!   random pruning). The counter form makes results independent of
//!   iteration order and thread schedule.
//!
//! Seeds derived from names go through SHA-256 so they are stable across
//! platforms and Rust versions (`std::hash` offers no such guarantee).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// splitmix64 finalizer; a bijection on u64 with strong avalanche.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// First 8 bytes (LE) of SHA-256 of `label`.
pub fn label_key(label: &str) -> u64 {
    let digest = Sha256::digest(label.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 output is 32 bytes"))
}

/// Derive an independent sub-seed from a base seed and a textual label.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    mix64(seed ^ label_key(label))
}

/// Stream RNG for a seed. ChaCha8 keeps draws identical on every platform.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Counter-based uniform draw in [0, 1), keyed by (key, name_key, index).
///
/// `name_key` should come from [`label_key`] on the tensor name. The same
/// triple always produces the same value, so callers may evaluate elements
/// in any order or in parallel.
#[inline]
pub fn unit_uniform(key: u64, name_key: u64, index: u64) -> f64 {
    let mut z = mix64(key);
    z = mix64(z ^ name_key);
    z = mix64(z ^ index);
    // Top 53 bits -> [0, 1).
    (z >> 11) as f64 * (1.0 / 9_007_199_254_740_992.0)
}
