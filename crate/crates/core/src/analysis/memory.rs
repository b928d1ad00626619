//! Bit-level footprint models for training and inference.

use crate::error::{Error, Result};
use crate::nm::NmPattern;

/// Storage cost of each training-time quantity, in bits.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct BitBudget {
    pub weight_bits: u32,
    /// Index bits per group; `None` uses `ceil(log2 C(m, n))`.
    pub index_bits: Option<u32>,
    /// Bits per mask element (8 for a byte mask, 1 for a bitmap).
    pub mask_bits: u32,
    pub grad_bits: u32,
    pub optimizer_states: u32,
    pub state_bits: u32,
    /// Keep a second compressed copy for the transposed product.
    pub store_transpose: bool,
}

impl Default for BitBudget {
    /// 16-bit weights and gradients, two 32-bit optimizer states, a byte mask
    /// and a stored transpose.
    fn default() -> Self {
        Self {
            weight_bits: 16,
            index_bits: None,
            mask_bits: 8,
            grad_bits: 16,
            optimizer_states: 2,
            state_bits: 32,
            store_transpose: true,
        }
    }
}

impl BitBudget {
    fn index_bits_for(&self, pattern: NmPattern) -> u32 {
        self.index_bits.unwrap_or_else(|| pattern.index_bits())
    }

    /// A budget for dense storage of the same pattern: no mask, no transpose.
    pub fn without_sparse_overheads(self) -> Self {
        Self {
            mask_bits: 0,
            store_transpose: false,
            ..self
        }
    }
}

/// Bits per group of `m` weights, split by term.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct TrainingBits {
    pub weights: f64,
    pub mask: f64,
    pub gradients: f64,
    pub optimizer: f64,
    pub sparse_total: f64,
    pub dense_total: f64,
    pub ratio: f64,
}

/// Per-group breakdown of [`training_memory_ratio`].
pub fn training_memory_bits(budget: &BitBudget, pattern: NmPattern) -> TrainingBits {
    let (n, m) = (pattern.n() as f64, pattern.m() as f64);
    let copies = if budget.store_transpose { 2.0 } else { 1.0 };
    let weights = copies * (n * budget.weight_bits as f64 + budget.index_bits_for(pattern) as f64);
    let mask = m * budget.mask_bits as f64;
    let gradients = n * budget.grad_bits as f64;
    let optimizer = n * budget.optimizer_states as f64 * budget.state_bits as f64;
    let sparse_total = weights + mask + gradients + optimizer;
    let dense_total = m * (budget.weight_bits + budget.grad_bits) as f64
        + m * budget.optimizer_states as f64 * budget.state_bits as f64;
    TrainingBits {
        weights,
        mask,
        gradients,
        optimizer,
        sparse_total,
        dense_total,
        ratio: sparse_total / dense_total,
    }
}

/// The bit terms read one-for-one as listed per group of `m` weights:
/// `copies x (weight_bits + index_bits)`, then mask, gradients and optimizer
/// states as in [`training_memory_bits`]. This charges a single stored value
/// per compressed copy, so it lands below the per-value formula whenever
/// `n > 1`. Kept as the second reading of the published footprint.
pub fn listed_training_bits(budget: &BitBudget, pattern: NmPattern) -> TrainingBits {
    let full = training_memory_bits(budget, pattern);
    let copies = if budget.store_transpose { 2.0 } else { 1.0 };
    let weights = copies * (budget.weight_bits + budget.index_bits_for(pattern)) as f64;
    let sparse_total = weights + full.mask + full.gradients + full.optimizer;
    TrainingBits {
        weights,
        sparse_total,
        ratio: sparse_total / full.dense_total,
        ..full
    }
}

/// Training footprint of a pruned linear layer relative to dense: compressed
/// weights (and transpose) with indices, mask, gradients and optimizer
/// states on kept values only.
pub fn training_memory_ratio(budget: &BitBudget, pattern: NmPattern) -> f64 {
    training_memory_bits(budget, pattern).ratio
}

/// Inference footprint relative to dense: kept values, per-group indices and
/// `(d_in + d_out) r` adapter values, all over `d_in d_out` dense values.
pub fn inference_memory_ratio(pattern: NmPattern, d_in: usize, d_out: usize, rank: usize, bits: u32) -> Result<f64> {
    if rank > d_in.min(d_out) {
        return Err(Error::InvalidArgument(format!(
            "adapter rank {rank} exceeds min({d_in}, {d_out})"
        )));
    }
    if d_in == 0 || d_out == 0 || bits == 0 {
        return Err(Error::InvalidArgument("dimensions and bit width must be positive".into()));
    }
    let area = d_in as f64 * d_out as f64;
    let w = bits as f64;
    let values = pattern.density() * area * w;
    let index = area / pattern.m() as f64 * pattern.index_bits() as f64;
    let adapters = (d_in + d_out) as f64 * rank as f64 * w;
    Ok((values + index + adapters) / (area * w))
}

/// Shape of one pruned linear layer for whole-model accounting.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct LayerShape {
    pub d_in: usize,
    pub d_out: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct ModelFootprint {
    pub sparse_bits: f64,
    pub dense_bits: f64,
    /// Bits of parameters that stay dense in both cases.
    pub remainder_bits: f64,
    pub ratio: f64,
}

/// Training footprint summed over pruned layers plus a dense remainder of
/// `remainder_params` parameters (embeddings, norms, heads) charged at the
/// dense per-parameter cost on both sides.
pub fn model_training_footprint(
    layers: &[LayerShape],
    pattern: NmPattern,
    budget: &BitBudget,
    remainder_params: usize,
) -> Result<ModelFootprint> {
    let per_group = training_memory_bits(budget, pattern);
    let mut sparse = 0.0;
    let mut dense = 0.0;
    for l in layers {
        pattern.check_divisible(l.d_in)?;
        let groups = (l.d_in * l.d_out / pattern.m()) as f64;
        sparse += groups * per_group.sparse_total;
        dense += groups * per_group.dense_total;
    }
    let per_param = (budget.weight_bits + budget.grad_bits) as f64 + (budget.optimizer_states * budget.state_bits) as f64;
    let remainder_bits = remainder_params as f64 * per_param;
    Ok(ModelFootprint {
        sparse_bits: sparse + remainder_bits,
        dense_bits: dense + remainder_bits,
        remainder_bits,
        ratio: (sparse + remainder_bits) / (dense + remainder_bits),
    })
}
