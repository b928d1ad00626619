//! Seeded randomness.
//!
//! Every random draw in the crate goes through [`SeededRng`], which is
//! xoshiro256++ seeded from a 64-bit value via SplitMix64 expansion
//! (`SeedableRng::seed_from_u64`). Independent streams are derived with
//! [`derive_seed`], so results depend only on the user-facing seed.

use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use rand::Rng;

pub type SeededRng = rand_xoshiro::Xoshiro256PlusPlus;

pub fn rng_from_seed(seed: u64) -> SeededRng {
    SeededRng::seed_from_u64(seed)
}

/// Mixes `stream` into `seed` (SplitMix64 finalizer) to get an independent sub-seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn standard_normal(rng: &mut SeededRng) -> f64 {
    StandardNormal.sample(rng)
}

/// Uniform draw in `[lo, hi)`.
pub fn uniform(rng: &mut SeededRng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}
