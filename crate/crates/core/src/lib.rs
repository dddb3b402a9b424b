//! Core numerics for conditional diffusion generation of M/EEG signals from
//! image embeddings.
//!
//! The crate is `no_std` and needs only `alloc`. File formats, the command
//! line and rendering live in the `neurogen` companion crate.

#![no_std]

extern crate alloc;

pub mod conditioning;
pub mod data;
pub mod embedding;
mod error;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod tensor;
pub mod topo;
pub mod trainer;
pub mod unet;

pub use conditioning::{ConditionEmbedding, CrossAttentionWeights, FusionMode};
pub use error::{Error, Result};
pub use schedule::{NoiseSchedule, ScheduleParams};
pub use tensor::Tensor;
pub use unet::{pad_to_grid, predict_noise, DenoiserConfig, DenoiserParams, PadSpec};
