//! Hierarchical seed derivation.
//!
//! Every source of randomness in a run is seeded by hashing the master seed
//! together with a path of string labels naming the consumer, e.g.
//! `derive(master, &["ratio:0", "split:1", "seed:2", "regime:tfs"])`. Labels
//! describe *phases and positions*, never incidental state, so two regimes
//! that share a phase (same labels) share its randomness exactly. The hash is
//! SHA-256 truncated to the first eight bytes, little-endian.

use sha2::{Digest, Sha256};

/// Derives a child seed from `master` and a label path.
pub fn derive(master: u64, path: &[&str]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(b"tfs-seed-v1");
    hasher.update(master.to_le_bytes());
    for label in path {
        // Length prefix keeps ["ab","c"] distinct from ["a","bc"].
        hasher.update((label.len() as u64).to_le_bytes());
        hasher.update(label.as_bytes());
    }
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has at least 8 bytes"))
}
