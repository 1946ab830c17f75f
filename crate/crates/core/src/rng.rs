//! Named deterministic RNG streams.
//!
//! Every random draw in the crate comes from a counter-based stream keyed by
//! (seed, purpose string, index). Dropout masks, parameter init, condition
//! sampling and data generation each get their own stream so that toggling
//! one feature never perturbs another's randomness.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Stream keyed by a purpose label.
pub fn stream(seed: u64, purpose: &str) -> ChaCha8Rng {
    substream(seed, purpose, 0)
}

/// Stream keyed by purpose plus an index (per-utterance, per-step, ...).
pub fn substream(seed: u64, purpose: &str, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&fnv1a(purpose.as_bytes()).to_le_bytes());
    key[16..24].copy_from_slice(&index.to_le_bytes());
    let mix = fnv1a(&key[..24]);
    key[24..32].copy_from_slice(&mix.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}
