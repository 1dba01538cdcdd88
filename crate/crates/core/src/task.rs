//! Child-model evaluation.
//!
//! [`Evaluator`] is the single-call contract between the search loop and
//! whatever scores a model spec. [`SurrogateEvaluator`] implements it with
//! a synthetic additive reward: each task prefers one option per dimension and
//! earns that dimension's weight when the spec picks it. Gaussian noise on the
//! validation and test rewards stands in for the randomness of training a
//! real child network.

use std::collections::HashSet;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::space::{ModelSpec, SearchSpace, SpaceError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TaskError {
    #[error("task `{task}`: {reason}")]
    InvalidTask { task: String, reason: String },
    #[error("invalid task family: {0}")]
    InvalidFamily(String),
    #[error(transparent)]
    Spec(#[from] SpaceError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("unknown task id {0}")]
    UnknownTask(usize),
    #[error(transparent)]
    InvalidSpec(#[from] SpaceError),
    #[error("evaluation failed: {0}")]
    Failed(String),
}

/// Bonus earned when two dimensions take specific options together.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Interaction {
    pub dims: [usize; 2],
    pub options: [usize; 2],
    pub weight: f64,
}

fn one() -> u64 {
    1
}

fn unit_cost() -> f64 {
    1.0
}

/// One synthetic task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskDefinition {
    pub name: String,
    #[serde(default)]
    pub cluster: usize,
    /// Preferred option per dimension.
    pub preferred: Vec<usize>,
    /// Reward earned per dimension when the preferred option is chosen.
    pub weights: Vec<f64>,
    #[serde(default)]
    pub base: f64,
    #[serde(default)]
    pub val_noise: f64,
    #[serde(default)]
    pub test_noise: f64,
    /// Validation noise is scaled by `1 / sqrt(val_size)`.
    #[serde(default = "one")]
    pub val_size: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub interactions: Vec<Interaction>,
    /// Wall-clock analog charged per evaluation.
    #[serde(default = "unit_cost")]
    pub cost: f64,
}

/// Result of scoring one spec on one task.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub validation_reward: f64,
    pub test_reward: f64,
    pub cost: f64,
}

impl TaskDefinition {
    pub fn validate(&self, space: &SearchSpace) -> Result<(), TaskError> {
        let bad = |reason: String| TaskError::InvalidTask {
            task: self.name.clone(),
            reason,
        };
        space
            .validate_spec(&ModelSpec::new(self.preferred.clone()))
            .map_err(|e| bad(format!("preferred options: {e}")))?;
        if self.weights.len() != space.len() {
            return Err(bad(format!(
                "{} weights for {} dimensions",
                self.weights.len(),
                space.len()
            )));
        }
        if self.weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(bad("weights must be finite and non-negative".into()));
        }
        let counts = space.option_counts();
        for i in &self.interactions {
            if !(i.weight.is_finite() && i.weight >= 0.0) {
                return Err(bad("interaction weights must be finite and non-negative".into()));
            }
            for k in 0..2 {
                if i.dims[k] >= counts.len() || i.options[k] >= counts[i.dims[k]] {
                    return Err(bad(format!("interaction {:?}/{:?} is out of range", i.dims, i.options)));
                }
            }
        }
        if !(self.base.is_finite() && self.base >= 0.0) {
            return Err(bad("base reward must be finite and non-negative".into()));
        }
        let top = self.max_bonus();
        if top > 1.0 + 1e-12 {
            return Err(bad(format!("base plus weights is {top}, above 1")));
        }
        for (what, v) in [("val_noise", self.val_noise), ("test_noise", self.test_noise), ("cost", self.cost)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(bad(format!("{what} must be finite and non-negative")));
            }
        }
        if self.val_size == 0 {
            return Err(bad("val_size must be at least 1".into()));
        }
        Ok(())
    }

    fn max_bonus(&self) -> f64 {
        self.base + self.weights.iter().sum::<f64>() + self.interactions.iter().map(|i| i.weight).sum::<f64>()
    }

    /// Reward without noise.
    pub fn noiseless_score(&self, spec: &ModelSpec) -> f64 {
        let mut s = self.base;
        for ((&c, &p), &w) in spec.choices.iter().zip(&self.preferred).zip(&self.weights) {
            if c == p {
                s += w;
            }
        }
        for i in &self.interactions {
            if spec.choices[i.dims[0]] == i.options[0] && spec.choices[i.dims[1]] == i.options[1] {
                s += i.weight;
            }
        }
        s
    }

    pub fn preferred_spec(&self) -> ModelSpec {
        ModelSpec::new(self.preferred.clone())
    }

    /// Best noiseless score. Equals the preferred spec's score when there are
    /// no interaction terms; otherwise found by enumeration.
    pub fn optimum_score(&self, space: &SearchSpace) -> f64 {
        if self.interactions.is_empty() {
            self.noiseless_score(&self.preferred_spec())
        } else {
            space
                .enumerate()
                .map(|s| self.noiseless_score(&s))
                .fold(f64::NEG_INFINITY, f64::max)
        }
    }

    pub fn validation_std(&self) -> f64 {
        self.val_noise / (self.val_size as f64).sqrt()
    }

    /// Scores `spec`; the validation noise is drawn before the test noise.
    pub fn evaluate<R: Rng + ?Sized>(&self, spec: &ModelSpec, rng: &mut R) -> Evaluation {
        let s = self.noiseless_score(spec);
        let eta_v = gaussian(self.validation_std(), rng);
        let eta_t = gaussian(self.test_noise, rng);
        Evaluation {
            validation_reward: (s + eta_v).clamp(0.0, 1.0),
            test_reward: (s + eta_t).clamp(0.0, 1.0),
            cost: self.cost,
        }
    }
}

fn gaussian<R: Rng + ?Sized>(std: f64, rng: &mut R) -> f64 {
    if std == 0.0 {
        0.0
    } else {
        Normal::new(0.0, std).expect("validated std").sample(rng)
    }
}

/// Scores specs for a set of tasks.
pub trait Evaluator: Sync {
    fn n_tasks(&self) -> usize;

    fn task_name(&self, task: usize) -> &str;

    /// Must be a pure function of its arguments so trials can run on any
    /// worker in any order.
    fn evaluate(&self, task: usize, spec: &ModelSpec, seed: u64) -> Result<Evaluation, EvalError>;
}

/// [`Evaluator`] over synthetic [`TaskDefinition`]s.
#[derive(Debug, Clone)]
pub struct SurrogateEvaluator {
    space: SearchSpace,
    tasks: Vec<TaskDefinition>,
}

impl SurrogateEvaluator {
    pub fn new(space: SearchSpace, tasks: Vec<TaskDefinition>) -> Result<Self, TaskError> {
        let mut names = HashSet::new();
        for t in &tasks {
            t.validate(&space)?;
            if !names.insert(t.name.as_str()) {
                return Err(TaskError::InvalidFamily(format!("duplicate task name `{}`", t.name)));
            }
        }
        Ok(Self { space, tasks })
    }

    pub fn tasks(&self) -> &[TaskDefinition] {
        &self.tasks
    }

    pub fn space(&self) -> &SearchSpace {
        &self.space
    }

    pub fn task_index(&self, name: &str) -> Option<usize> {
        self.tasks.iter().position(|t| t.name == name)
    }
}

impl Evaluator for SurrogateEvaluator {
    fn n_tasks(&self) -> usize {
        self.tasks.len()
    }

    fn task_name(&self, task: usize) -> &str {
        &self.tasks[task].name
    }

    fn evaluate(&self, task: usize, spec: &ModelSpec, seed: u64) -> Result<Evaluation, EvalError> {
        let def = self.tasks.get(task).ok_or(EvalError::UnknownTask(task))?;
        self.space.validate_spec(spec)?;
        Ok(def.evaluate(spec, &mut ChaCha8Rng::seed_from_u64(seed)))
    }
}

/// Task that is an outlier on one dimension: its preferred option there is
/// one no other task in the family prefers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutlierConfig {
    pub dimension: usize,
    /// Cluster whose shared preferences the outlier otherwise follows.
    #[serde(default)]
    pub cluster: usize,
}

/// Recipe for a clustered family of surrogate tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilyConfig {
    pub clusters: usize,
    pub tasks_per_cluster: usize,
    /// Dimensions on which all tasks of a cluster agree.
    pub shared_dims: Vec<usize>,
    /// Per cluster, the preferred option for each entry of `shared_dims`.
    /// Drawn at random when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cluster_preferences: Option<Vec<Vec<usize>>>,
    /// Reward weight per dimension, shared by every task.
    pub weights: Vec<f64>,
    #[serde(default)]
    pub base: f64,
    #[serde(default)]
    pub val_noise: f64,
    #[serde(default)]
    pub test_noise: f64,
    #[serde(default = "one")]
    pub val_size: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outlier: Option<OutlierConfig>,
}

/// Builds `clusters * tasks_per_cluster` tasks named `c<cluster>t<index>`,
/// plus a task named `outlier` when configured. Tasks of one cluster share
/// their preferred options on `shared_dims`; every other dimension is drawn
/// per task.
pub fn make_task_family(
    space: &SearchSpace,
    config: &FamilyConfig,
    seed: u64,
) -> Result<Vec<TaskDefinition>, TaskError> {
    let bad = |m: &str| TaskError::InvalidFamily(m.to_string());
    let counts = space.option_counts();
    if config.clusters == 0 || config.tasks_per_cluster == 0 {
        return Err(bad("need at least one cluster and one task per cluster"));
    }
    if config.weights.len() != counts.len() {
        return Err(bad("weights must list one value per dimension"));
    }
    let mut seen = HashSet::new();
    for &d in &config.shared_dims {
        if d >= counts.len() {
            return Err(bad("shared dimension out of range"));
        }
        if !seen.insert(d) {
            return Err(bad("shared dimension listed twice"));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cluster_prefs: Vec<Vec<usize>> = match &config.cluster_preferences {
        Some(p) => {
            if p.len() != config.clusters || p.iter().any(|c| c.len() != config.shared_dims.len()) {
                return Err(bad("cluster_preferences must be clusters x shared_dims"));
            }
            for c in p {
                for (&o, &d) in c.iter().zip(&config.shared_dims) {
                    if o >= counts[d] {
                        return Err(bad("cluster preference out of range"));
                    }
                }
            }
            p.clone()
        }
        None => (0..config.clusters)
            .map(|_| config.shared_dims.iter().map(|&d| rng.random_range(0..counts[d])).collect())
            .collect(),
    };

    let make = |name: String, cluster: usize, rng: &mut ChaCha8Rng| -> TaskDefinition {
        let preferred = (0..counts.len())
            .map(|d| match config.shared_dims.iter().position(|&s| s == d) {
                Some(k) => cluster_prefs[cluster][k],
                None => rng.random_range(0..counts[d]),
            })
            .collect();
        TaskDefinition {
            name,
            cluster,
            preferred,
            weights: config.weights.clone(),
            base: config.base,
            val_noise: config.val_noise,
            test_noise: config.test_noise,
            val_size: config.val_size,
            interactions: Vec::new(),
            cost: 1.0,
        }
    };

    let mut tasks = Vec::with_capacity(config.clusters * config.tasks_per_cluster + 1);
    for c in 0..config.clusters {
        for i in 0..config.tasks_per_cluster {
            tasks.push(make(format!("c{c}t{i}"), c, &mut rng));
        }
    }
    if let Some(out) = &config.outlier {
        if out.dimension >= counts.len() || out.cluster >= config.clusters {
            return Err(bad("outlier dimension or cluster out of range"));
        }
        let used: HashSet<usize> = tasks.iter().map(|t| t.preferred[out.dimension]).collect();
        let free: Vec<usize> = (0..counts[out.dimension]).filter(|o| !used.contains(o)).collect();
        let option = *free
            .choose(&mut rng)
            .ok_or_else(|| bad("no option left for the outlier on its dimension"))?;
        let mut task = make("outlier".to_string(), out.cluster, &mut rng);
        task.preferred[out.dimension] = option;
        tasks.push(task);
    }
    for t in &tasks {
        t.validate(space)?;
    }
    Ok(tasks)
}
