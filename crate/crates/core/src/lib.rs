//! Delayed KV caching for masked diffusion language models, on a small
//! seeded transformer.
//!
//! [`model`] holds the transformer and its partial forward pass, [`cache`]
//! decides which positions are recomputed each step and keeps the cached K/V
//! rows, [`sampler`] runs the reverse (unmasking) process and [`analysis`]
//! turns step traces into reports and K/V dynamics.

pub mod analysis;
pub mod cache;
pub mod checks;
pub mod model;
pub mod par;
pub mod sampler;
pub mod tensor;
