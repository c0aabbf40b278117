//! Discrete-event simulator for federated pipeline placement.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod engine;
pub mod failure;
pub mod record;
pub mod workload;

pub use config::{SimConfig, StrategyKind};
pub use engine::run_sim;
pub use failure::{FailureEvent, FailureKind, FailurePlan, FailureTarget};
pub use record::{PipelineRow, RunMeta, RunRecord, RunStats};
