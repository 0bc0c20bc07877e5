//! Deterministic seed derivation.
//!
//! Every stage, sample, and generation draws its randomness from a seed
//! derived by hashing a parent seed with a label. This keeps independent
//! parts of the pipeline decorrelated while making the whole run a pure
//! function of the master seed.

use sha2::{Digest, Sha256};

/// Derive a child seed from `base` and a label.
pub fn derive(base: u64, tag: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(base.to_le_bytes());
    hasher.update(tag.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

/// Derive a child seed for the `idx`-th item under a label.
pub fn derive_indexed(base: u64, tag: &str, idx: u64) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(base.to_le_bytes());
    hasher.update(tag.as_bytes());
    hasher.update(idx.to_le_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}
