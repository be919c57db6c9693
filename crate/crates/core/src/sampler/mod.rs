//! Absorbing-state noising and the reverse (unmasking) sampler.

mod generate;
mod noise;
mod predict;
mod schedule;

pub use generate::{generate, GenerateFailure, GenerateOptions, GenerationOutput, GenerationState, Generator, SamplerConfig};
pub use noise::corrupt;
pub use predict::{predict_x0, select_to_unmask, Proposal, Remasking};
pub use schedule::{alpha_bar, tokens_per_step_schedule, NoiseSchedule, StepAlloc, StepSchedule};

use thiserror::Error;

use crate::cache::CacheError;
use crate::model::ModelError;

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("invalid sampler config: {0}")]
    InvalidConfig(String),
    #[error("step {t} outside 0..={total}")]
    TimeOutOfRange { t: usize, total: usize },
    #[error("infeasible schedule: {0}")]
    InfeasibleSchedule(String),
    #[error("temperature must be finite and >= 0, got {0}")]
    NegativeTemperature(f32),
    #[error("cannot select {k} positions from {available} candidates")]
    TooManyToSelect { k: usize, available: usize },
    #[error("no logits available for position {0}")]
    MissingLogits(usize),
    #[error("generation already finished")]
    Finished,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Cache(#[from] CacheError),
}

pub type Result<T, E = SamplerError> = std::result::Result<T, E>;
