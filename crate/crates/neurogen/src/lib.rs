//! File formats, pipelines and the `neurogen` command line around
//! [`neurogen_core`].
//!
//! The formats: trial archives ([`archive`]), embedding file pairs and the
//! remote embedding protocol ([`embeddings`]), checkpoints ([`checkpoint`]),
//! montage files ([`montage`]), TOML run configurations ([`config`]) and
//! PNG topographies with JSON sidecars ([`render`]).

pub mod archive;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod embeddings;
mod error;
pub mod montage;
pub mod pipeline;
pub mod render;
pub mod synth;

pub use error::{Error, ExitKind, Result};
