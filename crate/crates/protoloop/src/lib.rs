//! File formats, round-state persistence, pipeline orchestration and the
//! command-line interface built on `protoloop-core`.

pub mod array_io;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod features;
pub mod manifest;
pub mod pipeline;
pub mod report;
pub mod state;
pub mod synth;

pub use error::{Error, Result};
pub use pipeline::{Pipeline, PipelineConfig};
pub use protoloop_core as core;
pub use state::RoundState;
