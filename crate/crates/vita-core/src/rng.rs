//! Deterministic RNG derivation.
//!
//! Every stochastic component takes an explicit seed derived from the global
//! experiment seed and a string label. Derivation is a fixed integer hash, so
//! the same (seed, label) pair always yields the same stream regardless of
//! platform or parallel schedule.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; decorrelates nearby inputs.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from a parent seed and a label.
///
/// The label is folded byte by byte through the mixer so that distinct labels
/// give independent streams even when they share a prefix.
pub fn derive_seed(parent: u64, label: &str) -> u64 {
    let mut state = mix64(parent ^ 0x5b1c_e5a9_f0d3_42d7);
    for &b in label.as_bytes() {
        state = mix64(state ^ u64::from(b));
    }
    state = mix64(state ^ (label.len() as u64));
    state
}

/// Derive a child seed indexed by an integer (batch index, image index, ...).
pub fn derive_seed_indexed(parent: u64, label: &str, index: u64) -> u64 {
    mix64(derive_seed(parent, label) ^ mix64(index))
}

/// The crate-wide RNG. ChaCha8 is seedable, portable, and fast enough for
/// the data volumes here.
pub type Rng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
