//! Seed discipline.
//!
//! A run owns a single `u64` seed. Every consumer of randomness (one parameter
//! tensor, the batch sampler at one step, a dataset generator) derives its own
//! ChaCha8 stream from `SHA-256(seed, domain, index)`. Streams never share
//! state, so adding a parameter or reordering initialisation leaves every other
//! stream untouched.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub fn stream(seed: u64, domain: &str, index: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((domain.len() as u64).to_le_bytes());
    h.update(domain.as_bytes());
    h.update(index.to_le_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// Stream keyed by a name rather than an index.
pub fn named(seed: u64, domain: &str, name: &str) -> ChaCha8Rng {
    stream(seed, &format!("{domain}/{name}"), 0)
}
