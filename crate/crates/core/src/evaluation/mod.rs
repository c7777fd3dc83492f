//! Patient-level folds, classification metrics, the shortcut partition and
//! the mutual-information audit.

mod folds;
mod metrics;
mod mi;
mod partition;

pub use folds::{stratified_folds, FoldSplit};
pub use metrics::{
    aggregate_folds, confusion, macro_f1, recall_large, Confusion, FoldMetrics, MetricsSummary,
};
pub use mi::{mutual_information, DEFAULT_BINS};
pub use partition::{
    partition_macro_f1, shortcut_partition, PartitionGroup, PartitionReport, PartitionScores,
};

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("length mismatch: {0} truths vs {1} predictions")]
    LengthMismatch(usize, usize),
    #[error("empty input")]
    Empty,
    #[error("metric undefined: {0}")]
    Undefined(&'static str),
}
