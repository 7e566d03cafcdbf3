//! Online domain-incremental learning by batch-normalization statistics
//! adaptation.
//!
//! A single classifier is trained on a base domain. Each new domain is learned
//! by forwarding a handful of unlabelled samples through the frozen network
//! with an adaptive batchnorm momentum, and the resulting running statistics
//! are stored per domain. At inference the caller supplies a task id and the
//! matching statistics are restored, so earlier domains are never forgotten.
//!
//! Modules:
//! - [`nn`]: tensors-in, tensors-out network core with SGD and checkpoints
//! - [`batchnorm`]: batch normalization with inspectable running statistics
//! - [`adapt`]: momentum schedule, statistics registry, adaptation, inference
//! - [`strategies`]: Base / FE / FT / Disjoint / Joint / ODIL protocols
//! - [`data`]: synthetic shifted domains, feature-file manifests, sample selection
//! - [`metrics`]: accuracy matrix, average accuracy, average forgetting
//! - [`experiment`]: configuration, data generation, runs and reports

pub mod adapt;
pub mod batchnorm;
pub mod data;
mod error;
pub mod experiment;
pub mod metrics;
pub mod nn;
pub mod strategies;
pub mod tensor;

pub use adapt::{
    adapt_domain, infer_with_task, momentum_sequence, AdaptBatch, AdaptSample, AdaptationConfig, DomainStatsRegistry,
    MomentumSchedule, SelectionPolicy, TaskId,
};
pub use batchnorm::{bn_restore, bn_snapshot, BnSnapshot, BnState};
pub use error::{Error, Result};
pub use metrics::{accuracy, average_accuracy, average_forgetting, AccuracyMatrix, EvalReport};
pub use nn::{Checkpoint, Mode, Model, ModelConfig};
pub use strategies::{run_strategy, train_base, Budget, Strategy, StrategyKind, TrainConfig};
pub use tensor::Tensor;
