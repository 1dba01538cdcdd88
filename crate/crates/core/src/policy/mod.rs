//! The recurrent controller: parameters, sampling, exact gradients,
//! optimizer steps and checkpoints.

mod checkpoint;
mod network;
mod optimizer;
mod params;
mod tensor;

use thiserror::Error;

pub use checkpoint::{
    checkpoint_load, checkpoint_save, decode as decode_checkpoint, encode as encode_checkpoint,
    inspect_checkpoint, CheckpointError, CheckpointHeader, FORMAT_VERSION, MAGIC,
};
pub use network::{LogProb, PolicyRollout, TaskInput};
pub use optimizer::{
    apply_scoped_update, apply_update, OptimizerKind, OptimizerState, UpdateScope, ADAM_BETA1, ADAM_BETA2,
    ADAM_EPSILON,
};
pub use params::{Architecture, ControllerParams, GradientSet, ParamSet, RecurrentLayer};
pub use tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("controller needs at least one task")]
    NoTasks,
    #[error("unknown task id {task} (controller has {n_tasks} tasks)")]
    UnknownTask { task: usize, n_tasks: usize },
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),
    #[error("gradient coefficient must be finite")]
    NonFiniteCoefficient,
    #[error("gradient contains non-finite values")]
    NonFiniteGradient,
    #[error("gradient and parameter shapes do not match")]
    ShapeMismatch,
    #[error("update rejected: it would produce non-finite parameters")]
    NonFiniteUpdate,
}
