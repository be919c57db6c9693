//! Step traces, cache metrics, compute counters and K/V dynamics.

mod dynamics;
mod metrics;
mod trace;

pub use dynamics::{kv_dynamics, Dynamics, TokenDynamics};
pub use metrics::{cache_ratio, compute_counters, throughput, Counters, RunReport};
pub use trace::{KvSnapshot, StepRecord, StepTrace};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("trace has no steps")]
    EmptyTrace,
    #[error("trace has no K/V snapshots (set snapshot_layer / --snapshots LAYER when generating)")]
    MissingSnapshots,
    #[error("elapsed time is zero")]
    ZeroElapsed,
    #[error("trace line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = AnalysisError> = std::result::Result<T, E>;
