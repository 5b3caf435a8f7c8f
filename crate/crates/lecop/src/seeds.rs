//! Deterministic seed derivation.
//!
//! A single run seed fans out to per-module seeds through a labeled hash, so
//! changing one stage's label or seed never perturbs the RNG stream of another.

use sha2::{Digest, Sha256};

/// Derive a child seed from `base` and a stage label.
pub fn derive_seed(base: u64, label: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(base.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Cheap per-item seed splitting for hot loops (walk generation, per-item RNGs).
///
/// splitmix64 finalizer over the xor of seed and index; not cryptographic,
/// just well-mixed and stable.
pub fn split_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
