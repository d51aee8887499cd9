//! Experiment runner: configuration, pipeline stages and the command line.

pub mod cli;
pub mod config;
pub mod pipeline;

pub use config::{Precision, RunConfig};
pub use pipeline::{Existing, Run};
