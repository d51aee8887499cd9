//! Dense-array substrate for the distillation lab.
//!
//! A small reverse-mode differentiation tape over row-major 2-D arrays,
//! the AdamW optimizer with its learning-rate schedule and EMA helper,
//! and the manifest + blob checkpoint format shared by every stage.

pub mod array;
pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod optim;
pub mod real;
pub mod store;
pub mod tape;

mod attention;

pub use array::DenseArray;
pub use checkpoint::{Archive, ArchiveEntry, Dtype, Manifest};
pub use error::{Error, Result};
pub use optim::{adamw_step, cosine_lr, ema_update, AdamWConfig, OptimizerState};
pub use real::Real;
pub use store::ParameterStore;
pub use tape::{try_value_and_grad, value_and_grad, Bound, CustomOp, Gradients, Segments, Tape, Var};
