//! Deterministic RNG stream derivation.
//!
//! Every source of randomness in the crate is a ChaCha12 stream derived from
//! `(seed, stream, index)`. Reconstructing the generator for any step from
//! scratch is what makes interrupted training resumable bit-for-bit.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Logical randomness streams. The discriminant is mixed into the seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    /// Weight initialization.
    Init = 1,
    /// Per-step timestep sampling.
    Timestep = 2,
    /// Per-step (or per-image) Gaussian noise.
    Noise = 3,
    /// Per-epoch dataset shuffling.
    Shuffle = 4,
    /// Probe head initialization and fitting.
    Probe = 5,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive an independent ChaCha12 generator for `(seed, stream, index)`.
pub fn derive(seed: u64, stream: Stream, index: u64) -> ChaCha12Rng {
    let mut key = [0u8; 32];
    let a = splitmix64(seed);
    let b = splitmix64(a ^ (stream as u64).wrapping_mul(0xa076_1d64_78bd_642f));
    let c = splitmix64(b ^ index.wrapping_mul(0xe703_7ed1_a0b4_28db));
    let d = splitmix64(c ^ seed);
    key[0..8].copy_from_slice(&a.to_le_bytes());
    key[8..16].copy_from_slice(&b.to_le_bytes());
    key[16..24].copy_from_slice(&c.to_le_bytes());
    key[24..32].copy_from_slice(&d.to_le_bytes());
    ChaCha12Rng::from_seed(key)
}
