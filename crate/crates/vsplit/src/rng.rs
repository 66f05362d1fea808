//! Seed derivation and RNG construction.
//!
//! Every source of randomness in the crate is a pure function of explicit
//! seeds. Sub-seeds are derived with a splitmix64 chain so that independent
//! consumers (epochs, samples, hierarchy levels, tiles) get decorrelated
//! streams without sharing mutable RNG state.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// splitmix64 step: a well-mixed 64-bit permutation used for seed derivation.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derive a sub-seed from a master seed and a list of tags (epoch numbers,
/// level indices, tile indices, ...). Order-sensitive.
pub fn derive_seed(master: u64, tags: &[u64]) -> u64 {
    let mut s = splitmix64(master);
    for &t in tags {
        s = splitmix64(s ^ t.wrapping_mul(0x9e3779b97f4a7c15));
    }
    s
}

/// Construct the crate's standard RNG from a seed.
pub fn rng_from(seed: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(seed)
}
