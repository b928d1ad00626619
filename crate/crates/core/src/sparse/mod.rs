//! Sparse kernels: SpMM, sparse add, prune-and-compress, in-place value
//! update, square tiling and the fused sparse + low-rank forward.

pub mod bench;
pub mod fused;
pub mod ops;
pub mod spmm;
pub mod tiling;

pub use fused::{fused_sparse_lowrank_forward, lowrank_forward_unfused, AdapterPair};
pub use ops::{prune_and_compress, sparse_add, update_sparse_values};
pub use spmm::spmm;
pub use tiling::{plan_square_tiles, tiled_spmm, TilePlan, TiledWeight};
