//! Derivation of independent RNG streams from one master seed.
//!
//! Every source of randomness in a run (parameter init, batch sampling,
//! neighborhood sampling, permutation tests, layout permutations) draws from
//! its own stream so that changing one consumer does not shift the others.

use sha2::{Digest, Sha256};

/// Derive a child seed from a master seed and a purpose tag.
pub fn derive_seed(master: u64, tag: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update(tag.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}
