//! Run configuration files.
//!
//! ```toml
//! [run]
//! mode = "multitask"
//! budget = 2000
//! seed = 7
//!
//! [space]
//! preset = "text"
//!
//! [tasks.family]
//! clusters = 2
//! tasks_per_cluster = 4
//! shared_dims = [0, 1, 2, 3]
//! weights = [0.1, 0.1, 0.1, 0.1, 0.05, 0.05, 0.05, 0.05, 0.05, 0.05, 0.05, 0.05]
//! ```
//!
//! Unknown keys are rejected everywhere.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::metrics::{DEFAULT_STRIDE, DEFAULT_TOP_N};
use crate::policy::{Architecture, OptimizerKind};
use crate::reward::DEFAULT_DECAY;
use crate::seed::{derive_seed, TASK_FAMILY};
use crate::space::{Dimension, SearchSpace, SpaceDefinition, SpaceError};
use crate::task::{make_task_family, Evaluator, FamilyConfig, SurrogateEvaluator, TaskDefinition, TaskError};
use crate::trainer::{LearnerSettings, Mode, RunSettings};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("invalid search space: {0}")]
    Space(#[from] SpaceError),
    #[error("invalid tasks: {0}")]
    Task(#[from] TaskError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub mode: Mode,
    pub budget: u64,
    #[serde(default = "one_worker")]
    pub parallelism: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_every: Option<u64>,
    /// Source controller for transfer, the fixed-architecture ablation and
    /// the transfer half of the no-task-embedding ablation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub from_checkpoint: Option<PathBuf>,
    /// Target task for single-task modes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<String>,
    /// Pretraining tasks; defaults to every task not held out.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tasks: Option<Vec<String>>,
    #[serde(default)]
    pub freeze_shared: bool,
}

fn one_worker() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControllerSection {
    pub learning_rate: f64,
    pub embedding_size: usize,
    pub hidden_size: usize,
    pub init_range: f64,
    pub entropy_weight: f64,
    pub optimizer: OptimizerKind,
    pub reward_decay: f64,
}

impl Default for ControllerSection {
    fn default() -> Self {
        let l = LearnerSettings::default();
        Self {
            learning_rate: l.learning_rate,
            embedding_size: l.architecture.embedding_size,
            hidden_size: l.architecture.hidden_size,
            init_range: l.architecture.init_range,
            entropy_weight: l.entropy_weight,
            optimizer: l.optimizer,
            reward_decay: DEFAULT_DECAY,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsSection {
    pub top_n: usize,
    pub stride: usize,
}

impl Default for MetricsSection {
    fn default() -> Self {
        Self {
            top_n: DEFAULT_TOP_N,
            stride: DEFAULT_STRIDE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct SpaceSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dimensions: Option<Vec<Dimension>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct TasksSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub family: Option<FamilyConfig>,
    /// Seed for family generation; derived from the run seed when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub family_seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub list: Vec<TaskDefinition>,
    /// Tasks excluded from the default pretraining set.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub holdout: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    #[serde(default)]
    pub controller: ControllerSection,
    #[serde(default)]
    pub metrics: MetricsSection,
    pub space: SpaceSection,
    pub tasks: TasksSection,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub mode: Option<Mode>,
    pub seed: Option<u64>,
    pub budget: Option<u64>,
    pub parallelism: Option<usize>,
    pub from_checkpoint: Option<PathBuf>,
}

/// A validated config with the objects it describes.
#[derive(Debug, Clone)]
pub struct ResolvedConfig {
    pub config: RunConfig,
    pub space: SearchSpace,
    pub evaluator: SurrogateEvaluator,
    /// Evaluator index of the single target task, when the mode has one.
    pub target: Option<usize>,
    /// Evaluator indices trained during pretraining.
    pub pretrain_tasks: Vec<usize>,
}

impl RunConfig {
    pub fn from_toml(src: &str, origin: &str) -> Result<Self, ConfigError> {
        toml::from_str(src).map_err(|e| ConfigError::Parse {
            path: origin.to_string(),
            message: e.to_string(),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let src = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&src, &path.display().to_string())
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(m) = o.mode {
            self.run.mode = m;
        }
        if let Some(s) = o.seed {
            self.run.seed = s;
        }
        if let Some(b) = o.budget {
            self.run.budget = b;
        }
        if let Some(w) = o.parallelism {
            self.run.parallelism = w;
        }
        if let Some(p) = &o.from_checkpoint {
            self.run.from_checkpoint = Some(p.clone());
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical TOML rendering, hex encoded.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            embedding_size: self.controller.embedding_size,
            hidden_size: self.controller.hidden_size,
            init_range: self.controller.init_range,
        }
    }

    pub fn settings(&self) -> RunSettings {
        let c = &self.controller;
        RunSettings {
            budget: self.run.budget,
            parallelism: self.run.parallelism,
            seed: self.run.seed,
            learner: LearnerSettings {
                architecture: self.architecture(),
                learning_rate: c.learning_rate,
                entropy_weight: c.entropy_weight,
                optimizer: c.optimizer,
                reward_decay: c.reward_decay,
                freeze_shared: self.run.freeze_shared,
            },
            checkpoint_every: self.run.checkpoint_every,
            checkpoint_dir: None,
            config_digest: self.digest(),
        }
    }

    /// Whether the mode reads a source controller.
    pub fn needs_checkpoint(&self) -> bool {
        match self.run.mode {
            Mode::Transfer | Mode::AblateFixedArchitecture => true,
            Mode::AblateNoTaskEmbedding => self.run.from_checkpoint.is_some(),
            _ => false,
        }
    }

    fn build_space(&self) -> Result<SearchSpace, ConfigError> {
        match (&self.space.preset, &self.space.dimensions) {
            (Some(p), None) => Ok(SearchSpace::preset(p)?),
            (None, Some(d)) => Ok(SearchSpace::build(SpaceDefinition { dimensions: d.clone() })?),
            _ => Err(ConfigError::Invalid(
                "[space] needs exactly one of `preset` or `dimensions`".into(),
            )),
        }
    }

    /// Checks every field and builds the space and tasks.
    pub fn resolve(self) -> Result<ResolvedConfig, ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        let r = &self.run;
        if r.budget == 0 {
            return invalid("run.budget must be at least 1".into());
        }
        if r.parallelism == 0 {
            return invalid("run.parallelism must be at least 1".into());
        }
        if r.checkpoint_every == Some(0) {
            return invalid("run.checkpoint_every must be at least 1".into());
        }
        let c = &self.controller;
        if !(c.learning_rate.is_finite() && c.learning_rate > 0.0) {
            return invalid("controller.learning_rate must be positive".into());
        }
        if c.embedding_size == 0 || c.hidden_size == 0 {
            return invalid("controller.embedding_size and hidden_size must be positive".into());
        }
        if !(c.init_range.is_finite() && c.init_range >= 0.0) {
            return invalid("controller.init_range must be finite and non-negative".into());
        }
        if !(c.entropy_weight.is_finite() && c.entropy_weight >= 0.0) {
            return invalid("controller.entropy_weight must be finite and non-negative".into());
        }
        if !(c.reward_decay > 0.0 && c.reward_decay <= 1.0) {
            return invalid("controller.reward_decay must lie in (0, 1]".into());
        }
        if self.metrics.top_n == 0 || self.metrics.stride == 0 {
            return invalid("metrics.top_n and metrics.stride must be at least 1".into());
        }
        if self.needs_checkpoint() && r.from_checkpoint.is_none() {
            return invalid(format!("mode {} requires run.from_checkpoint", r.mode));
        }

        let space = self.build_space()?;
        let tasks = match (&self.tasks.family, self.tasks.list.is_empty()) {
            (Some(f), true) => {
                let seed = self.tasks.family_seed.unwrap_or_else(|| derive_seed(r.seed, TASK_FAMILY, 0));
                make_task_family(&space, f, seed)?
            }
            (None, false) => self.tasks.list.clone(),
            _ => return invalid("[tasks] needs exactly one of `family` or `list`".into()),
        };
        let evaluator = SurrogateEvaluator::new(space.clone(), tasks)?;
        let lookup = |name: &str| {
            evaluator
                .task_index(name)
                .ok_or_else(|| ConfigError::Invalid(format!("unknown task `{name}`")))
        };
        for h in &self.tasks.holdout {
            lookup(h)?;
        }

        let pretraining = matches!(r.mode, Mode::Multitask)
            || (r.mode == Mode::AblateNoTaskEmbedding && r.from_checkpoint.is_none());
        let (target, pretrain_tasks) = if pretraining {
            let list = match &r.tasks {
                Some(names) => names.iter().map(|n| lookup(n)).collect::<Result<Vec<_>, _>>()?,
                None => (0..evaluator.n_tasks())
                    .filter(|&i| !self.tasks.holdout.iter().any(|h| h == evaluator.task_name(i)))
                    .collect(),
            };
            if list.is_empty() {
                return invalid("no tasks left to pretrain on".into());
            }
            if r.mode == Mode::Multitask && list.len() < 2 {
                return invalid("multitask mode needs at least two tasks".into());
            }
            (None, list)
        } else {
            let t = match &r.task {
                Some(name) => lookup(name)?,
                None if evaluator.n_tasks() == 1 => 0,
                None => return invalid(format!("mode {} needs run.task when several tasks are defined", r.mode)),
            };
            (Some(t), Vec::new())
        };
        Ok(ResolvedConfig {
            config: self,
            space,
            evaluator,
            target,
            pretrain_tasks,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[run]
mode = "single_task"
budget = 20

[space]
dimensions = [
  { name = "a", options = ["x", "y"] },
  { name = "b", options = ["x", "y", "z"] },
]

[[tasks.list]]
name = "only"
preferred = [1, 2]
weights = [0.3, 0.3]
"#;

    #[test]
    fn defaults_are_filled() {
        let cfg = RunConfig::from_toml(MINIMAL, "min.toml").unwrap();
        assert_eq!(cfg.controller.learning_rate, 1e-4);
        assert_eq!(cfg.controller.embedding_size, 25);
        assert_eq!(cfg.controller.hidden_size, 50);
        assert_eq!(cfg.controller.reward_decay, 0.01);
        assert_eq!(cfg.metrics.top_n, 10);
        let resolved = cfg.resolve().unwrap();
        assert_eq!(resolved.target, Some(0));
        let text = resolved.config.to_toml();
        let again = RunConfig::from_toml(&text, "resolved").unwrap();
        assert_eq!(again, resolved.config);
        assert!(text.contains("learning_rate = 0.0001"));
    }

    #[test]
    fn overrides_win() {
        let mut cfg = RunConfig::from_toml(&MINIMAL.replace("budget = 20", "budget = 20\nseed = 3"), "x").unwrap();
        cfg.apply(&Overrides {
            seed: Some(7),
            budget: Some(5),
            ..Overrides::default()
        });
        assert_eq!(cfg.run.seed, 7);
        assert_eq!(cfg.run.budget, 5);
    }

    #[test]
    fn unknown_key_is_named() {
        let src = MINIMAL.replace("[space]", "[controller]\nlearnig_rate = 0.1\n\n[space]");
        let err = RunConfig::from_toml(&src, "typo.toml").unwrap_err().to_string();
        assert!(err.contains("learnig_rate"), "{err}");
        assert!(err.starts_with("typo.toml"), "{err}");
        assert!(err.contains("line"), "{err}");
    }

    #[test]
    fn invalid_values() {
        let zero = RunConfig::from_toml(&MINIMAL.replace("budget = 20", "budget = 0"), "x").unwrap();
        assert!(matches!(zero.resolve(), Err(ConfigError::Invalid(_))));
        let transfer = RunConfig::from_toml(&MINIMAL.replace("single_task", "transfer"), "x").unwrap();
        assert!(transfer.resolve().unwrap_err().to_string().contains("from_checkpoint"));
        let multi = RunConfig::from_toml(&MINIMAL.replace("single_task", "multitask"), "x").unwrap();
        assert!(multi.resolve().is_err());
    }

    #[test]
    fn family_with_holdout() {
        let src = r#"
[run]
mode = "multitask"
budget = 10
seed = 4

[space]
preset = "text"

[tasks]
holdout = ["c0t3"]

[tasks.family]
clusters = 2
tasks_per_cluster = 4
shared_dims = [0, 1, 2, 3]
weights = [0.1, 0.1, 0.1, 0.1, 0.05, 0.05, 0.05, 0.05, 0.05, 0.05, 0.05, 0.05]
"#;
        let r = RunConfig::from_toml(src, "fam").unwrap().resolve().unwrap();
        assert_eq!(r.evaluator.n_tasks(), 8);
        assert_eq!(r.pretrain_tasks, vec![0, 1, 2, 4, 5, 6, 7]);
        let r2 = RunConfig::from_toml(src, "fam").unwrap().resolve().unwrap();
        assert_eq!(r.evaluator.tasks(), r2.evaluator.tasks());
    }
}
