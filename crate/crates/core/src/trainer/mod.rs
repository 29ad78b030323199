//! Optimization, training loop, evaluation, checkpoints and the command line.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod eval;
pub mod optim;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{StorageDtype, TrainConfig};
pub use eval::{evaluate_completeness, evaluate_retrieval, FeatureSource, RetrievalMetrics};
pub use optim::{adamw_step, lr_at, OptimizerState, WeightDecay};
pub use train::{train, DeskData, MetricsRecord, TrainFailure, TrainOutcome};
