//! Seed management: per-purpose sub-streams derived from one experiment seed.
//!
//! Every random draw in the crate comes from a ChaCha12 stream keyed by
//! `(seed, tag)`. Adding a new consumer with a fresh tag never perturbs the
//! draws of existing consumers, so instances are reproducible bit-for-bit
//! for a fixed `(params, seed)` on one platform.

use ndarray::Array1;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A reproducible generator for the sub-stream `(seed, tag)`.
pub fn sub_rng(seed: u64, tag: &str) -> ChaCha12Rng {
    let th = fnv1a(tag.as_bytes());
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&th.to_le_bytes());
    key[16..24].copy_from_slice(&splitmix64(seed ^ th).to_le_bytes());
    key[24..32].copy_from_slice(&splitmix64(th.rotate_left(17) ^ !seed).to_le_bytes());
    ChaCha12Rng::from_seed(key)
}

/// `len` i.i.d. standard normal draws from the sub-stream `(seed, tag)`.
pub fn standard_normal_vec(seed: u64, tag: &str, len: usize) -> Array1<f64> {
    let mut rng = sub_rng(seed, tag);
    Array1::from_iter((0..len).map(|_| StandardNormal.sample(&mut rng)))
}
