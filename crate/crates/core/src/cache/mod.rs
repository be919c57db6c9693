//! Delayed KV-cache planning and storage.
//!
//! Each step the engine decides which positions are recomputed (the compute
//! set) and which are served from cache, lays rows out as
//! `[cached ; fresh]` with rotary positions following the rows, and after the
//! forward pass carries the next step's cached rows forward with a single
//! gather per layer.

mod engine;
mod layout;
mod plan;
mod variant;

pub use engine::{CacheEngine, Fault, LayoutRecord};
pub use layout::{build_layout, concat_reorder, reorder_index, scatter_outputs, ComputePlan, Layout, PositionLogits};
pub use plan::{cacheable_rows, greedy_window, is_refresh_step, plan_compute_set, shift_rows, PlanInput};
pub use variant::{CacheConfig, CacheVariant, ExecPath, ShiftMode, WindowCenter};

use thiserror::Error;

use crate::model::ModelError;

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("invalid cache config: {0}")]
    InvalidConfig(String),
    #[error("greedy caching needs a predefined decode order (random remasking)")]
    MissingDecodeOrder,
    #[error("masked set grew between steps: position {0} is masked now but was not before")]
    MaskedSetGrew(usize),
    #[error("layout soundness violated: {0}")]
    LayoutUnsound(String),
    #[error("reorder index {index} out of bounds for {len} layout rows")]
    ReorderOutOfBounds { index: usize, len: usize },
    #[error("logit rows ({rows}) do not match compute set size ({expected})")]
    LogitRows { rows: usize, expected: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T, E = CacheError> = std::result::Result<T, E>;
