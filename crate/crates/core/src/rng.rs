//! Seed derivation and the crate's RNG flavor.
//!
//! Every randomized component derives its own stream from a base seed and a
//! purpose tag, so generation order never couples unrelated components and
//! streams are stable across platforms.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha12Rng;

/// Derive a child seed from a base seed and a purpose tag.
pub fn derive_seed(base: u64, tag: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(base.to_le_bytes());
    hasher.update(tag.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// RNG seeded for a (base seed, tag) pair.
pub fn rng_for(base: u64, tag: &str) -> Rng {
    Rng::seed_from_u64(derive_seed(base, tag))
}
