//! Transfer neural AutoML.
//!
//! An autoregressive recurrent controller samples model specs from a discrete
//! search space and is trained with REINFORCE. Several tasks can share one
//! controller: each task owns a learned embedding that is fed to the
//! controller at every step, and rewards are normalized per task with
//! exponential moving averages. A controller pretrained this way can be
//! transferred to a new task by appending a fresh task embedding.
//!
//! Child models are scored through the [`task::Evaluator`] trait. The crate
//! ships a synthetic surrogate task family ([`task::SurrogateEvaluator`]) with
//! clustered task preferences, so search and transfer behaviour can be
//! studied without training real networks.

pub mod config;
pub mod metrics;
pub mod policy;
pub mod reward;
pub mod seed;
pub mod space;
pub mod task;
pub mod trainer;

pub use policy::{ControllerParams, PolicyError, PolicyRollout, TaskInput};
pub use reward::{RewardStats, StatsError};
pub use space::{ModelSpec, SearchSpace, SpaceError};
pub use task::{EvalError, Evaluation, Evaluator, SurrogateEvaluator, TaskDefinition};
