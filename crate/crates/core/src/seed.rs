//! Per-purpose seed derivation.
//!
//! Every random stream in the pipeline is seeded from a single master seed and a
//! purpose label, so re-running only one stage reproduces the same numbers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// First eight bytes (little-endian) of `SHA-256(master_seed_le || label)`.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn derived_rng(master: u64, label: &str) -> ChaCha8Rng {
    rng_from_seed(derive_seed(master, label))
}
