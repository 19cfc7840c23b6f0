//! Keyed deterministic random streams.
//!
//! Every stream is a ChaCha8 keystream whose 256-bit key is the SHA-256 of
//! `(seed, index, tag)`. Streams are platform independent and never share
//! state, so clip generation and parameter init can run in any order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type KeyedRng = ChaCha8Rng;

pub fn keyed_rng(seed: u64, index: u64, tag: &str) -> KeyedRng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(index.to_le_bytes());
    h.update((tag.len() as u64).to_le_bytes());
    h.update(tag.as_bytes());
    let key: [u8; 32] = h.finalize().into();
    ChaCha8Rng::from_seed(key)
}

/// Derives a child seed, used to hand sub-components their own seed value.
pub fn derive_seed(seed: u64, index: u64, tag: &str) -> u64 {
    use rand::RngCore;
    keyed_rng(seed, index, tag).next_u64()
}
