//! Double-pruned N:M sparse training at desk scale.
//!
//! * [`nm`]: patterns, masks, single and double pruning, the packed format.
//! * [`sparse`]: SpMM and the sparse update kernels, square tiling, the fused
//!   sparse + low-rank forward.
//! * [`train`]: sparse linear layers, optimizers, toy models and the trainer.
//! * [`analysis`]: unbiasedness checks, memory and FLOP models, trackers.

pub mod analysis;
pub mod dense;
pub mod error;
pub mod nm;
pub mod rng;
pub mod scalar;
pub mod sparse;
pub mod train;

pub use dense::DenseMatrix;
pub use error::{Error, Result};
pub use nm::{NmCompressed, NmMask, NmPattern, Orientation};
pub use scalar::{Dtype, Scalar};
