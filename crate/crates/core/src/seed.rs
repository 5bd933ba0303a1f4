//! Stable seed derivation.
//!
//! Every randomized stage draws from a [`ChaCha8Rng`] whose seed is derived
//! from a single master seed. Derivation hashes the master seed together
//! with a stream index (or a stage label), so results do not depend on how
//! many draws earlier stages made or on thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Sub-seed for stream `index` of `master` (e.g. mutant attempt `index`).
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(b"mutguard/stream");
    hasher.update(master.to_le_bytes());
    hasher.update(index.to_le_bytes());
    first_u64(&hasher.finalize())
}

/// Sub-seed for a named pipeline stage.
pub fn stage_seed(master: u64, stage: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(b"mutguard/stage");
    hasher.update(master.to_le_bytes());
    hasher.update(stage.as_bytes());
    first_u64(&hasher.finalize())
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn first_u64(digest: &[u8]) -> u64 {
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

/// `⌈n·rate⌉`, ignoring floating-point noise below 1e-9 so that e.g.
/// `100 × 0.03` selects 3 items rather than 4.
pub fn ceil_fraction(n: usize, rate: f64) -> usize {
    let exact = n as f64 * rate;
    let rounded = exact.round();
    if (exact - rounded).abs() < 1e-9 {
        rounded as usize
    } else {
        exact.ceil() as usize
    }
}
