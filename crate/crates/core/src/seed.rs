//! Seed derivation. Every random draw in the crate comes from a ChaCha stream
//! whose seed is a pure function of a run seed and a small set of keys, so
//! results never depend on evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// SplitMix64 finalizer.
pub fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Combines two words into a new seed; not symmetric.
pub fn derive(seed: u64, key: u64) -> u64 {
    splitmix(splitmix(seed) ^ key.rotate_left(17))
}

/// Hash of the exact bit patterns of a row of observations.
pub fn hash_row(row: &[f64]) -> u64 {
    row.iter()
        .fold(0x243F_6A88_85A3_08D3u64, |h, v| splitmix(h ^ v.to_bits()))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn standard_normals(seed: u64, n: usize) -> Vec<f64> {
    let mut r = rng(seed);
    (0..n).map(|_| StandardNormal.sample(&mut r)).collect()
}

/// Domain tags keep streams for different purposes apart.
pub mod tag {
    pub const JOINT: u64 = 0x4A4F_494E_54;
    pub const MIXTURE: u64 = 0x4D49_5854;
    pub const MARGINAL: u64 = 0x4D41_5247;
    pub const BATCH: u64 = 0x4241_5443_48;
    pub const NEGATIVES: u64 = 0x4E45_4741;
    pub const GENERATE: u64 = 0x4745_4E;
    pub const CROSS: u64 = 0x4352_4F53;
    pub const INIT: u64 = 0x494E_4954;
    pub const EVAL: u64 = 0x4556_414C;
    pub const DATA: u64 = 0x4441_5441;
}
