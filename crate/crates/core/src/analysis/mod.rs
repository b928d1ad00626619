//! Unbiasedness checks for the double-pruned backward pass, analytic memory
//! and FLOP models, and run trackers.

pub mod flops;
pub mod memory;
pub mod theorem1;
pub mod trackers;

pub use flops::{flop_model, FlopReport};
pub use memory::{
    inference_memory_ratio, listed_training_bits, model_training_footprint, training_memory_bits, training_memory_ratio, BitBudget,
    LayerShape, ModelFootprint, TrainingBits,
};
pub use theorem1::{
    least_squares_slope, theorem1_check, theorem1_error_curve, ErrorCurve, EstimatorStats, MaskFamily, Theorem1Report,
};
pub use trackers::{adapter_convergence, cosine_similarity, mask_change_series, AdapterCosine};
