//! Deterministic random streams.
//!
//! Every random decision in the crate draws from a ChaCha stream keyed by the
//! master seed and a path string naming the operation (for example
//! `"layer/1/proc/3/lanczos"`). Streams are independent of thread scheduling
//! and identical across platforms.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Stream = ChaCha8Rng;

/// Random stream for `path` under the master `seed`.
pub fn stream(seed: u64, path: &str) -> Stream {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(path.as_bytes());
    let key: [u8; 32] = hasher.finalize().into();
    ChaCha8Rng::from_seed(key)
}

/// Derive a child seed, for APIs that take a plain integer seed.
pub fn derive_seed(seed: u64, path: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(b"/seed/");
    hasher.update(path.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}
