//! Per-task reward normalization.
//!
//! Each task keeps an exponential moving average of its rewards (the
//! baseline) and of the squared deviation from that baseline. Advantages are
//! centred on the baseline and divided by the running standard deviation so
//! that every task contributes gradients of comparable scale.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_DECAY: f64 = 0.01;
/// Floor on the standard deviation used for normalization.
pub const STD_FLOOR: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("reward must be finite, got {0}")]
    NonFiniteReward(f64),
    #[error("task {0} has no reward observations yet")]
    NoObservations(usize),
    #[error("unknown task id {0}")]
    UnknownTask(usize),
    #[error("decay must lie in (0, 1], got {0}")]
    InvalidDecay(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskRewardStats {
    pub baseline: f64,
    pub variance: f64,
    pub count: u64,
}

impl TaskRewardStats {
    pub fn std_dev(&self) -> f64 {
        self.variance.sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardStats {
    decay: f64,
    tasks: Vec<TaskRewardStats>,
}

impl RewardStats {
    pub fn new(n_tasks: usize, decay: f64) -> Result<Self, StatsError> {
        if !(decay > 0.0 && decay <= 1.0) {
            return Err(StatsError::InvalidDecay(decay));
        }
        Ok(Self {
            decay,
            tasks: vec![
                TaskRewardStats {
                    baseline: 0.0,
                    variance: 0.0,
                    count: 0,
                };
                n_tasks
            ],
        })
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    pub fn n_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn task(&self, task: usize) -> Option<&TaskRewardStats> {
        self.tasks.get(task)
    }

    pub fn tasks(&self) -> &[TaskRewardStats] {
        &self.tasks
    }

    /// Makes room for tasks up to `n_tasks`, with empty statistics.
    pub fn ensure_tasks(&mut self, n_tasks: usize) {
        while self.tasks.len() < n_tasks {
            self.tasks.push(TaskRewardStats {
                baseline: 0.0,
                variance: 0.0,
                count: 0,
            });
        }
    }

    /// Folds one reward into the task's averages. The first observation sets
    /// the baseline to the reward and the variance to 1. Later ones update the
    /// baseline first and then the variance around the new baseline.
    pub fn update(&mut self, task: usize, reward: f64) -> Result<(), StatsError> {
        if !reward.is_finite() {
            return Err(StatsError::NonFiniteReward(reward));
        }
        let alpha = self.decay;
        let s = self.tasks.get_mut(task).ok_or(StatsError::UnknownTask(task))?;
        if s.count == 0 {
            s.baseline = reward;
            s.variance = 1.0;
        } else {
            s.baseline = (1.0 - alpha) * s.baseline + alpha * reward;
            let dev = reward - s.baseline;
            s.variance = (1.0 - alpha) * s.variance + alpha * dev * dev;
        }
        s.count += 1;
        Ok(())
    }

    /// `(reward - baseline) / max(std, STD_FLOOR)` with the current statistics.
    pub fn normalized_advantage(&self, task: usize, reward: f64) -> Result<f64, StatsError> {
        let s = self.tasks.get(task).ok_or(StatsError::UnknownTask(task))?;
        if s.count == 0 {
            return Err(StatsError::NoObservations(task));
        }
        Ok((reward - s.baseline) / s.std_dev().max(STD_FLOOR))
    }
}
