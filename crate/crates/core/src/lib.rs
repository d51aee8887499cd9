//! Distribution-matching distillation of a conditional sequence diffusion
//! model, on a synthetic latent task with analytic oracles.

pub mod error;
pub mod latent;
pub mod rng;
pub mod schedule;

pub use error::{LabError, Result};
pub use latent::{LatentSequence, PromptMask};
pub mod synthtask;
pub mod evalkit;
pub mod nets;
pub mod auxmodels;
pub mod train;
pub mod sampling;
pub mod teacher;
pub mod distill;
