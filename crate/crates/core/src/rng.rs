//! Seed derivation. Every random draw in the pipeline comes from a ChaCha
//! stream keyed by a base seed plus a purpose label, so results never depend
//! on call order across unrelated components.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Stable 64-bit hash of a seed and a list of labels.
pub fn derive_seed(seed: u64, labels: &[&str]) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for l in labels {
        h.update((l.len() as u64).to_le_bytes());
        h.update(l.as_bytes());
    }
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().expect("sha256 has 32 bytes"))
}

/// Counter-based generator: `(seed, counter)` always yields the same stream.
pub fn stream(seed: u64, counter: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(counter);
    rng
}

pub fn rng_for(seed: u64, labels: &[&str]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, labels))
}

/// Hex SHA-256 of a byte string.
pub fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
