//! Toy bidirectional transformer with rotary positions.
//!
//! The model supports two entry points: a full forward over every position and
//! a partial forward over an arbitrary ordered compute set whose attention also
//! sees caller-supplied cached keys/values. Rotary angles are keyed to the
//! original sequence position of each row, never to its storage slot, so any
//! row layout produces the same per-token outputs.

mod attention;
mod config;
mod forward;
mod rope;
mod weights;

pub use attention::{attention, attention_weights, KvSegment};
pub use config::ModelConfig;
pub use forward::{forward_full, forward_partial, ForwardResult, KvSlab};
pub use rope::rope_rotate;
pub use weights::{LayerWeights, ModelWeights, Projection, TensorEntry, WeightManifest};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("position {position} out of range (max_positions = {max})")]
    PositionOutOfRange { position: usize, max: usize },
    #[error("sequence of length {len} exceeds max_positions = {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("token id {id} at position {position} is outside the vocabulary of {vocab}")]
    InvalidToken { position: usize, id: u32, vocab: usize },
    #[error("attention needs at least one key row")]
    EmptyKeys,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("cache/compute position sets are inconsistent: {0}")]
    PositionSets(String),
    #[error("cache has {found} layers, model has {expected}")]
    CacheLayers { expected: usize, found: usize },
    #[error("weight file: {0}")]
    WeightFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;
