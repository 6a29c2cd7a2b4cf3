//! Stable derivation of sub-seeds from one run seed.

use sha2::{Digest, Sha256};

/// Hashes `(seed, label)` into a new seed. Stable across platforms and
/// releases, so runs stay reproducible from the single user seed.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}
