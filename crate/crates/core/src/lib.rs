//! Core model for market-based placement of stage pipelines across federated
//! administrative domains: pipeline DAGs, polymatroid feasibility, market
//! clearing, comparator strategies, broker federation state and statistics.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod dag;
pub mod error;
pub mod federation;
pub mod market;
pub mod polymatroid;
pub mod stats;
pub mod strategies;
pub mod topology;

pub use error::{Error, Result};
