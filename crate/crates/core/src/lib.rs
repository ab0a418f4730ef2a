//! User-resizable residual networks.
//!
//! Residual networks whose blocks are gated by small Conditional Gating
//! Modules conditioned on the block input and a user-supplied scale `S`.
//! Training with a scale loss makes the fraction of executed blocks follow
//! `S`, so inference cost can be dialed at run time.

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
mod linalg;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod tensor;
pub mod trainer;

pub use error::{CheckpointError, Error, Result, TensorError};
pub use graph::{BnMode, Graph, RunningStats, Var};
pub use model::{GateMode, GateRecord, ModePolicy, ModelSpec, ScaleParam, UrnetModel};
pub use tensor::Tensor;
