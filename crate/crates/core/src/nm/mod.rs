//! N:M patterns, masks, pruning and the compressed format.

pub mod compressed;
pub mod format;
pub mod lemma;
pub mod mask;
pub mod pattern;

pub use compressed::NmCompressed;
pub use lemma::{lemma1_analytic, lemma1_monte_carlo, MonteCarloEstimate};
pub use mask::{double_prune, magnitude_mask, random_mask, NmMask, Orientation};
pub use pattern::NmPattern;

/// `ceil(log2(C(m, n)))`, the bits needed per group index code.
pub fn index_bits(pattern: NmPattern) -> u32 {
    pattern.index_bits()
}
