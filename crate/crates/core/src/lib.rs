//! Retraining-free structured pruning for transformer language models.
//!
//! The pipeline treats every attention block and every feed-forward block as
//! a depth-2 module: level-1 layers (`W_Q/W_K/W_V` or `W_U[/W_G]`) whose
//! output channels are pruned with the same indices as the input channels of
//! the level-2 layer (`W_O` or `W_D`). Inner channels are scored with a
//! second-moment metric, attention heads are additionally deduplicated by
//! Jensen-Shannon distance between their attention patterns, and each
//! module's weights can be re-fit by least squares against the dense model's
//! outputs before it is pruned.
//!
//! Modules:
//! - [`linalg`]: tensors, kernels, Cholesky least squares
//! - [`checkpoint`]: on-disk model, plan and corpus formats
//! - [`model`]: forward pass with activation taps, generation, plan slicing
//! - [`calib`]: calibration batches from a corpus or self-generation
//! - [`stats`]: streaming covariance / cross-product / divergence accumulators
//! - [`metrics`]: importance scores and similar-head candidates
//! - [`pruner`]: sparsity targets, budgets and plans
//! - [`recovery`]: sequential prune / reconstruct pipeline
//! - [`eval`]: perplexity and inspection reports

pub mod calib;
pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod plan;
pub mod pruner;
pub mod recovery;
pub mod seed;
pub mod stats;
pub mod toy;

pub use checkpoint::{Checkpoint, ModelConfig, TokenCorpus};
pub use error::{Error, Result};
pub use linalg::{SolveOptions, Tensor};
pub use model::{ModelGraph, Sampler, TokenBatch};
pub use plan::{Granularity, ModuleId, ModuleKind, ModulePlan, PruningPlan};

/// Version tag written into every JSON report and manifest.
pub const SCHEMA: &str = "d2p/1";
