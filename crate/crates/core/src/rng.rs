//! Deterministic, purpose-keyed random streams.
//!
//! Every stochastic stage draws from its own ChaCha stream, keyed by the
//! master seed, a stage label, and an index. Stages therefore never share or
//! shift each other's randomness: disabling one stage (for an ablation)
//! leaves every other stage's draws bit-identical.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};

/// A fresh stream for `(master, label, index)`.
pub fn stream(master: u64, label: &str, index: u64) -> ChaCha12Rng {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update([label.len() as u8]);
    hasher.update(label.as_bytes());
    hasher.update(index.to_le_bytes());
    let digest: [u8; 32] = hasher.finalize().into();
    ChaCha12Rng::from_seed(digest)
}

/// Uniform sample of `k` distinct entries from `pool`. Asking for the whole
/// pool (or more) returns it unshuffled without consuming randomness, so a
/// full-batch configuration draws nothing from the stream.
pub fn choose_without_replacement(
    pool: &[usize],
    k: usize,
    rng: &mut impl rand::Rng,
) -> Vec<usize> {
    use rand::seq::SliceRandom;
    if k >= pool.len() {
        return pool.to_vec();
    }
    let mut scratch = pool.to_vec();
    let (chosen, _) = scratch.partial_shuffle(rng, k);
    chosen.to_vec()
}
