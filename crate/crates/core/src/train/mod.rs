//! Sparse linear layers, optimizers, toy models and the training loop.

pub mod config;
pub mod data;
pub mod layer;
pub mod model;
pub mod nn;
pub mod optim;
pub mod report;
pub mod trainer;

pub use config::{content_hash, MaskMode, ModelKind, PrunedModules, TrainConfig};
pub use data::{Batch, Dataset};
pub use layer::{DenseLinear, DynamicSparseLinear, Linear, LinearGrads, SparseLinearLayer};
pub use model::ToyModel;
pub use optim::{LrSchedule, Optimizer, OptimizerKind};
pub use trainer::{train, RunReport, Trainer};
