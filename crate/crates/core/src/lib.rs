//! Loss-aware greedy structured filter pruning.
//!
//! The crate trains a convolutional network for a few epochs, then repeatedly
//! removes the group of filters whose removal hurts a small probe set the
//! least. Every prunable layer is ranked under a pool of importance criteria
//! (l1, l2, Euclidean and cosine redundancy), each (layer, criterion) pair is
//! tried on a physically pruned copy, and the cheapest candidate is kept
//! until a FLOPs reduction target is met. Training then resumes on the slim
//! network.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the element type for the common cases.

pub mod config;
pub mod criteria;
pub mod data;
pub mod error;
pub mod flops;
pub mod graph;
pub mod model;
pub mod pruner;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use config::{RunConfig, StepMode, TrainSchedule};
pub use criteria::{Criterion, CriterionScore, CosineForm};
pub use error::{Error, Result};
pub use flops::{ExplorationPlan, FlopsReport};
pub use graph::{PruningGroup, SurgeryReceipt};
pub use model::{build_model, ArchSpec, Batch, LayerInfo, LayerKind};
pub use pruner::{PruneLog, PruneLogEntry, RunStatus};
pub use scalar::Scalar;
pub use tensor::Tensor;
pub use train::EpochRecord;

pub type Network<T = f32> = model::Network<T>;

pub type Network32 = model::Network<f32>;
pub type Network64 = model::Network<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Batch32 = model::Batch<f32>;
pub type Batch64 = model::Batch<f64>;
