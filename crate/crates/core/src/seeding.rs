//! Named random sub-streams derived from one experiment seed.
//!
//! Every consumer of randomness (dataset rendering, initialization, dropout,
//! splitting, shuffling) draws from its own stream so each can be re-seeded
//! without disturbing the others.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub const DATASET: &str = "dataset";
pub const INIT: &str = "init";
pub const DROPOUT: &str = "dropout";
pub const SPLIT: &str = "split";
pub const SHUFFLE: &str = "shuffle";

fn digest(seed: u64, label: &str, index: u64) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((label.len() as u64).to_le_bytes());
    h.update(label.as_bytes());
    h.update(index.to_le_bytes());
    h.finalize().into()
}

pub fn stream(seed: u64, label: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(digest(seed, label, index))
}

pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let d = digest(seed, label, 0);
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}
