//! Search loops: random search, single-task and multitask controller
//! training, transfer, and the two task-agnostic ablations.
//!
//! Every mode runs through one dispatch/complete loop. With one worker the
//! loop is plain sequential code. With more, `W` scoped threads sample and
//! evaluate trials from a parameter snapshot taken at dispatch, while the
//! calling thread applies updates one completion at a time.

use std::path::PathBuf;
use std::sync::Arc;
use std::thread;

use crossbeam_channel::{bounded, unbounded};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{LogMeta, MetricsError, TrialLog, TrialRecord};
use crate::policy::{
    apply_scoped_update, checkpoint_save, Architecture, CheckpointError, ControllerParams, OptimizerKind,
    OptimizerState, PolicyError, TaskInput, UpdateScope,
};
use crate::reward::{RewardStats, StatsError};
use crate::seed::{self, derive_rng, evaluation_seed};
use crate::space::{ModelSpec, SearchSpace};
use crate::task::{EvalError, Evaluator};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Random,
    SingleTask,
    Multitask,
    Transfer,
    AblateNoTaskEmbedding,
    AblateFixedArchitecture,
}

impl Mode {
    pub const ALL: [Mode; 6] = [
        Mode::Random,
        Mode::SingleTask,
        Mode::Multitask,
        Mode::Transfer,
        Mode::AblateNoTaskEmbedding,
        Mode::AblateFixedArchitecture,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Random => "random",
            Mode::SingleTask => "single_task",
            Mode::Multitask => "multitask",
            Mode::Transfer => "transfer",
            Mode::AblateNoTaskEmbedding => "ablate_no_task_embedding",
            Mode::AblateFixedArchitecture => "ablate_fixed_architecture",
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown mode `{s}`"))
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid run settings: {0}")]
    Settings(String),
    #[error("numeric failure at trial {trial}: {source}")]
    Numeric { trial: u64, source: PolicyError },
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Log(#[from] MetricsError),
}

/// Controller hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnerSettings {
    pub architecture: Architecture,
    pub learning_rate: f64,
    pub entropy_weight: f64,
    pub optimizer: OptimizerKind,
    pub reward_decay: f64,
    /// Transfer only: train the new task embedding and keep shared weights fixed.
    pub freeze_shared: bool,
}

impl Default for LearnerSettings {
    fn default() -> Self {
        Self {
            architecture: Architecture::default(),
            learning_rate: 1e-4,
            entropy_weight: 1e-2,
            optimizer: OptimizerKind::Adam,
            reward_decay: crate::reward::DEFAULT_DECAY,
            freeze_shared: false,
        }
    }
}

/// Settings shared by every mode.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSettings {
    pub budget: u64,
    pub parallelism: usize,
    pub seed: u64,
    pub learner: LearnerSettings,
    /// Save `checkpoint-<trials>.taml` into `checkpoint_dir` every this many trials.
    pub checkpoint_every: Option<u64>,
    pub checkpoint_dir: Option<PathBuf>,
    pub config_digest: String,
}

impl RunSettings {
    pub fn new(budget: u64, seed: u64) -> Self {
        Self {
            budget,
            parallelism: 1,
            seed,
            learner: LearnerSettings::default(),
            checkpoint_every: None,
            checkpoint_dir: None,
            config_digest: String::new(),
        }
    }

    fn check(&self) -> Result<(), TrainError> {
        if self.budget == 0 {
            return Err(TrainError::Settings("budget must be at least 1".into()));
        }
        if self.parallelism == 0 {
            return Err(TrainError::Settings("parallelism must be at least 1".into()));
        }
        let l = &self.learner;
        if !(l.learning_rate.is_finite() && l.learning_rate > 0.0) {
            return Err(TrainError::Settings("learning rate must be positive".into()));
        }
        if !(l.entropy_weight.is_finite() && l.entropy_weight >= 0.0) {
            return Err(TrainError::Settings("entropy weight must be finite and non-negative".into()));
        }
        if self.checkpoint_every == Some(0) {
            return Err(TrainError::Settings("checkpoint_every must be at least 1".into()));
        }
        Ok(())
    }
}

/// Per-trial status handed to the observer after the trial is folded in.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialStatus<'a> {
    pub record: &'a TrialRecord,
    pub baseline: Option<f64>,
    pub std_dev: Option<f64>,
    pub advantage: Option<f64>,
}

impl std::fmt::Display for TrialStatus<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let r = self.record;
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
        write!(
            f,
            "trial {} task {} reward {} b {} sigma {} adv {}",
            r.trial,
            r.task_name,
            opt(r.val),
            opt(self.baseline),
            opt(self.std_dev),
            opt(self.advantage)
        )?;
        if let Some(e) = &r.error {
            write!(f, " failed: {e}")?;
        }
        Ok(())
    }
}

pub type Observer<'a> = &'a mut dyn FnMut(&TrialStatus<'_>);

/// Controller state carried between runs.
#[derive(Debug, Clone, PartialEq)]
pub struct Controller {
    pub params: ControllerParams,
    pub optimizer: OptimizerState,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub log: TrialLog,
    pub controller: Option<Controller>,
    pub stats: Option<RewardStats>,
    /// Task name for every controller embedding row.
    pub embedding_names: Vec<String>,
}

/// A task the loop can schedule: what the controller sees, which evaluator
/// task scores it, and which statistics row normalizes its rewards.
#[derive(Debug, Clone, Copy)]
struct Arm {
    input: TaskInput,
    eval_task: usize,
    row: usize,
}

#[derive(Debug, Clone)]
enum Sampler {
    Uniform,
    Policy,
    Fixed(ModelSpec),
}

struct Learner {
    controller: Controller,
    stats: RewardStats,
    learning_rate: f64,
    entropy_weight: f64,
    scope: UpdateScope,
}

struct Job {
    dispatch: u64,
    arm: usize,
    snapshot: Option<Arc<ControllerParams>>,
}

struct Completion {
    arm: usize,
    spec: ModelSpec,
    version: u64,
    outcome: Result<crate::task::Evaluation, String>,
}

fn execute<E: Evaluator + ?Sized>(
    job: &Job,
    arms: &[Arm],
    sampler: &Sampler,
    space: &SearchSpace,
    evaluator: &E,
    root: u64,
) -> Result<Completion, PolicyError> {
    let arm = arms[job.arm];
    let (spec, version) = match sampler {
        Sampler::Uniform => (space.sample_uniform(&mut derive_rng(root, seed::UNIFORM, job.dispatch)), 0),
        Sampler::Fixed(spec) => (spec.clone(), 0),
        Sampler::Policy => {
            let params = job.snapshot.as_ref().expect("policy jobs carry a snapshot");
            let rollout = params.sample_rollout(arm.input, &mut derive_rng(root, seed::ROLLOUT, job.dispatch))?;
            (rollout.spec, rollout.parameter_version)
        }
    };
    let seed = evaluation_seed(root, evaluator.task_name(arm.eval_task), job.dispatch);
    let outcome = match evaluator.evaluate(arm.eval_task, &spec, seed) {
        Ok(e) if e.validation_reward.is_finite() && e.test_reward.is_finite() => Ok(e),
        Ok(_) => Err("evaluator returned a non-finite reward".to_string()),
        Err(EvalError::Failed(m)) => Err(m),
        Err(e) => Err(e.to_string()),
    };
    Ok(Completion {
        arm: job.arm,
        spec,
        version,
        outcome,
    })
}

struct Loop<'a, E: Evaluator + ?Sized> {
    space: &'a SearchSpace,
    evaluator: &'a E,
    arms: Vec<Arm>,
    sampler: Sampler,
    learner: Option<Learner>,
    settings: &'a RunSettings,
    log: TrialLog,
    cost: f64,
}

impl<E: Evaluator + ?Sized> Loop<'_, E> {
    fn job(&self, dispatch: u64, schedule: &mut impl Rng, cached: &mut Option<Arc<ControllerParams>>) -> Job {
        let arm = if self.arms.len() == 1 {
            0
        } else {
            schedule.random_range(0..self.arms.len())
        };
        let snapshot = match (&self.sampler, &self.learner) {
            (Sampler::Policy, Some(l)) => {
                let fresh = cached.as_ref().is_none_or(|s| s.version() != l.controller.params.version());
                if fresh {
                    *cached = Some(Arc::new(l.controller.params.clone()));
                }
                cached.clone()
            }
            _ => None,
        };
        Job { dispatch, arm, snapshot }
    }

    /// Logs one completion and applies its update.
    fn complete(&mut self, c: Completion, observer: &mut Option<Observer<'_>>) -> Result<(), TrainError> {
        let trial = self.log.len() as u64;
        let arm = self.arms[c.arm];
        let mut status = (None, None, None);
        let (val, test, error) = match c.outcome {
            Ok(e) => {
                self.cost += e.cost;
                if let Some(l) = &mut self.learner {
                    let row = arm.row;
                    l.stats.update(row, e.validation_reward)?;
                    let adv = l.stats.normalized_advantage(row, e.validation_reward)?;
                    let s = l.stats.task(row).expect("row exists");
                    status = (Some(s.baseline), Some(s.std_dev()), Some(adv));
                    let grad = l
                        .controller
                        .params
                        .policy_gradient(arm.input, &c.spec, adv, l.entropy_weight)
                        .map_err(|source| TrainError::Numeric { trial, source })?;
                    apply_scoped_update(
                        &mut l.controller.params,
                        &grad,
                        &mut l.controller.optimizer,
                        l.learning_rate,
                        l.scope,
                    )
                    .map_err(|source| TrainError::Numeric { trial, source })?;
                }
                (Some(e.validation_reward), Some(e.test_reward), None)
            }
            Err(m) => (None, None, Some(m)),
        };
        let record = TrialRecord {
            trial,
            task: arm.eval_task,
            task_name: self.evaluator.task_name(arm.eval_task).to_string(),
            spec: c.spec,
            val,
            test,
            version: c.version,
            wall_cost: self.cost,
            error,
        };
        if let Some(obs) = observer {
            obs(&TrialStatus {
                record: &record,
                baseline: status.0,
                std_dev: status.1,
                advantage: status.2,
            });
        }
        self.log.push(record)?;
        self.maybe_checkpoint()?;
        Ok(())
    }

    fn maybe_checkpoint(&self) -> Result<(), TrainError> {
        let (Some(every), Some(dir), Some(l)) = (
            self.settings.checkpoint_every,
            &self.settings.checkpoint_dir,
            &self.learner,
        ) else {
            return Ok(());
        };
        let done = self.log.len() as u64;
        if done % every == 0 {
            checkpoint_save(
                &l.controller.params,
                &l.controller.optimizer,
                &self.space.content_hash(),
                dir.join(format!("checkpoint-{done:08}.taml")),
            )?;
        }
        Ok(())
    }

    fn run(mut self, mut observer: Option<Observer<'_>>) -> Result<(TrialLog, Option<Learner>), TrainError> {
        let budget = self.settings.budget;
        let root = self.settings.seed;
        let mut schedule = derive_rng(root, seed::TASK_SCHEDULE, 0);
        let mut cached = None;
        let workers = self.settings.parallelism.min(budget as usize).max(1);
        if workers == 1 {
            for dispatch in 0..budget {
                let job = self.job(dispatch, &mut schedule, &mut cached);
                let c = execute(&job, &self.arms, &self.sampler, self.space, self.evaluator, root)?;
                self.complete(c, &mut observer)?;
            }
            return Ok((self.log, self.learner));
        }

        let (job_tx, job_rx) = bounded::<Job>(workers);
        let (done_tx, done_rx) = unbounded::<Result<Completion, PolicyError>>();
        let arms = self.arms.clone();
        let sampler = self.sampler.clone();
        let (space, evaluator) = (self.space, self.evaluator);
        thread::scope(|scope| -> Result<(), TrainError> {
            for _ in 0..workers {
                let (job_rx, done_tx) = (job_rx.clone(), done_tx.clone());
                let (arms, sampler) = (&arms, &sampler);
                scope.spawn(move || {
                    for job in job_rx {
                        if done_tx.send(execute(&job, arms, sampler, space, evaluator, root)).is_err() {
                            break;
                        }
                    }
                });
            }
            drop(done_tx);
            let mut dispatched = 0u64;
            let result = (|| {
                while dispatched < budget && dispatched < workers as u64 {
                    job_tx.send(self.job(dispatched, &mut schedule, &mut cached)).expect("workers alive");
                    dispatched += 1;
                }
                let mut completed = 0u64;
                while completed < budget {
                    let c = done_rx.recv().expect("workers alive")?;
                    completed += 1;
                    self.complete(c, &mut observer)?;
                    if dispatched < budget {
                        job_tx.send(self.job(dispatched, &mut schedule, &mut cached)).expect("workers alive");
                        dispatched += 1;
                    }
                }
                Ok(())
            })();
            drop(job_tx);
            result
        })?;
        Ok((self.log, self.learner))
    }
}

fn meta(mode: Mode, space: &SearchSpace, settings: &RunSettings) -> LogMeta {
    LogMeta::new(mode.as_str(), settings.seed, space.content_hash_hex(), settings.config_digest.clone())
}

fn check_task<E: Evaluator + ?Sized>(evaluator: &E, task: usize) -> Result<(), TrainError> {
    if task >= evaluator.n_tasks() {
        return Err(TrainError::Settings(format!(
            "task {task} out of range ({} tasks)",
            evaluator.n_tasks()
        )));
    }
    Ok(())
}

fn new_learner(space: &SearchSpace, n_tasks: usize, settings: &RunSettings) -> Result<Learner, TrainError> {
    let l = &settings.learner;
    let params = ControllerParams::init(
        space,
        n_tasks,
        l.architecture.clone(),
        &mut derive_rng(settings.seed, seed::CONTROLLER_INIT, 0),
    )?;
    let optimizer = OptimizerState::new(l.optimizer, &params);
    Ok(Learner {
        controller: Controller { params, optimizer },
        stats: RewardStats::new(n_tasks, l.reward_decay)?,
        learning_rate: l.learning_rate,
        entropy_weight: l.entropy_weight,
        scope: UpdateScope::All,
    })
}

fn outcome(log: TrialLog, learner: Option<Learner>, embedding_names: Vec<String>) -> RunOutcome {
    let (controller, stats) = match learner {
        Some(l) => (Some(l.controller), Some(l.stats)),
        None => (None, None),
    };
    RunOutcome {
        log,
        controller,
        stats,
        embedding_names,
    }
}

/// Uniform random search on one task.
pub fn run_random_search<E: Evaluator + ?Sized>(
    space: &SearchSpace,
    evaluator: &E,
    task: usize,
    settings: &RunSettings,
    observer: Option<Observer<'_>>,
) -> Result<RunOutcome, TrainError> {
    settings.check()?;
    check_task(evaluator, task)?;
    let (log, _) = Loop {
        space,
        evaluator,
        arms: vec![Arm {
            input: TaskInput::Task(0),
            eval_task: task,
            row: 0,
        }],
        sampler: Sampler::Uniform,
        learner: None,
        settings,
        log: TrialLog::new(meta(Mode::Random, space, settings)),
        cost: 0.0,
    }
    .run(observer)?;
    Ok(outcome(log, None, Vec::new()))
}

/// Trains a fresh one-task controller with an update after every completion.
pub fn run_single_task<E: Evaluator + ?Sized>(
    space: &SearchSpace,
    evaluator: &E,
    task: usize,
    settings: &RunSettings,
    observer: Option<Observer<'_>>,
) -> Result<RunOutcome, TrainError> {
    settings.check()?;
    check_task(evaluator, task)?;
    let (log, learner) = Loop {
        space,
        evaluator,
        arms: vec![Arm {
            input: TaskInput::Task(0),
            eval_task: task,
            row: 0,
        }],
        sampler: Sampler::Policy,
        learner: Some(new_learner(space, 1, settings)?),
        settings,
        log: TrialLog::new(meta(Mode::SingleTask, space, settings)),
        cost: 0.0,
    }
    .run(observer)?;
    Ok(outcome(log, learner, vec![evaluator.task_name(task).to_string()]))
}

fn pretrain<E: Evaluator + ?Sized>(
    mode: Mode,
    space: &SearchSpace,
    evaluator: &E,
    tasks: &[usize],
    settings: &RunSettings,
    observer: Option<Observer<'_>>,
) -> Result<RunOutcome, TrainError> {
    settings.check()?;
    if tasks.is_empty() {
        return Err(TrainError::Settings("multitask training needs at least one task".into()));
    }
    for &t in tasks {
        check_task(evaluator, t)?;
    }
    let blank = mode == Mode::AblateNoTaskEmbedding;
    let arms = tasks
        .iter()
        .enumerate()
        .map(|(row, &eval_task)| Arm {
            input: if blank { TaskInput::Blank } else { TaskInput::Task(row) },
            eval_task,
            row,
        })
        .collect();
    let (log, learner) = Loop {
        space,
        evaluator,
        arms,
        sampler: Sampler::Policy,
        learner: Some(new_learner(space, tasks.len(), settings)?),
        settings,
        log: TrialLog::new(meta(mode, space, settings)),
        cost: 0.0,
    }
    .run(observer)?;
    let names = tasks.iter().map(|&t| evaluator.task_name(t).to_string()).collect();
    Ok(outcome(log, learner, names))
}

/// Multitask pretraining: each trial draws a task uniformly and conditions the
/// controller on that task's embedding.
pub fn run_multitask<E: Evaluator + ?Sized>(
    space: &SearchSpace,
    evaluator: &E,
    tasks: &[usize],
    settings: &RunSettings,
    observer: Option<Observer<'_>>,
) -> Result<RunOutcome, TrainError> {
    pretrain(Mode::Multitask, space, evaluator, tasks, settings, observer)
}

fn transfer<E: Evaluator + ?Sized>(
    mode: Mode,
    space: &SearchSpace,
    evaluator: &E,
    task: usize,
    source: Controller,
    source_names: &[String],
    settings: &RunSettings,
    observer: Option<Observer<'_>>,
) -> Result<RunOutcome, TrainError> {
    settings.check()?;
    check_task(evaluator, task)?;
    if source.params.option_counts() != space.option_counts().as_slice() {
        return Err(TrainError::Settings("source controller was built for a different space".into()));
    }
    let Controller {
        mut params,
        mut optimizer,
    } = source;
    let row = params.add_task_embedding(&mut derive_rng(settings.seed, seed::TRANSFER_EMBEDDING, 0));
    optimizer.grow_task_rows(params.n_tasks());
    let l = &settings.learner;
    let learner = Learner {
        stats: RewardStats::new(params.n_tasks(), l.reward_decay)?,
        controller: Controller { params, optimizer },
        learning_rate: l.learning_rate,
        entropy_weight: l.entropy_weight,
        scope: if l.freeze_shared {
            UpdateScope::TaskEmbeddingsOnly
        } else {
            UpdateScope::All
        },
    };
    let input = if mode == Mode::AblateNoTaskEmbedding {
        TaskInput::Blank
    } else {
        TaskInput::Task(row)
    };
    let (log, learner) = Loop {
        space,
        evaluator,
        arms: vec![Arm {
            input,
            eval_task: task,
            row,
        }],
        sampler: Sampler::Policy,
        learner: Some(learner),
        settings,
        log: TrialLog::new(meta(mode, space, settings)),
        cost: 0.0,
    }
    .run(observer)?;
    let mut names = source_names.to_vec();
    names.truncate(row);
    while names.len() < row {
        names.push(format!("source{}", names.len()));
    }
    names.push(evaluator.task_name(task).to_string());
    Ok(outcome(log, learner, names))
}

/// Continues training a pretrained controller on a new task through a freshly
/// appended task embedding. Shared weights keep training unless
/// `freeze_shared` is set. Optimizer moments carry over from the source.
/// Rows without a name in `source_names` are called `source{i}`.
pub fn run_transfer<E: Evaluator + ?Sized>(
    space: &SearchSpace,
    evaluator: &E,
    task: usize,
    source: Controller,
    source_names: &[String],
    settings: &RunSettings,
    observer: Option<Observer<'_>>,
) -> Result<RunOutcome, TrainError> {
    transfer(Mode::Transfer, space, evaluator, task, source, source_names, settings, observer)
}

/// Which half of the no-task-embedding ablation to run.
#[derive(Debug, Clone)]
pub enum AblationPhase<'a> {
    Pretrain { tasks: &'a [usize] },
    Transfer { task: usize, source: Controller },
}

/// Multitask pretraining or transfer with the task input replaced by zeros.
pub fn run_ablation_no_task_embedding<E: Evaluator + ?Sized>(
    space: &SearchSpace,
    evaluator: &E,
    phase: AblationPhase<'_>,
    settings: &RunSettings,
    observer: Option<Observer<'_>>,
) -> Result<RunOutcome, TrainError> {
    match phase {
        AblationPhase::Pretrain { tasks } => pretrain(Mode::AblateNoTaskEmbedding, space, evaluator, tasks, settings, observer),
        AblationPhase::Transfer { task, source } => transfer(
            Mode::AblateNoTaskEmbedding,
            space,
            evaluator,
            task,
            source,
            &[],
            settings,
            observer,
        ),
    }
}

/// Re-evaluates the greedy spec of a task-agnostic controller `budget` times.
pub fn run_fixed_architecture_transfer<E: Evaluator + ?Sized>(
    space: &SearchSpace,
    evaluator: &E,
    task: usize,
    source: &ControllerParams,
    settings: &RunSettings,
    observer: Option<Observer<'_>>,
) -> Result<RunOutcome, TrainError> {
    settings.check()?;
    check_task(evaluator, task)?;
    if source.option_counts() != space.option_counts().as_slice() {
        return Err(TrainError::Settings("source controller was built for a different space".into()));
    }
    let spec = source.modal_spec(TaskInput::Blank)?;
    let (log, _) = Loop {
        space,
        evaluator,
        arms: vec![Arm {
            input: TaskInput::Blank,
            eval_task: task,
            row: 0,
        }],
        sampler: Sampler::Fixed(spec),
        learner: None,
        settings,
        log: TrialLog::new(meta(Mode::AblateFixedArchitecture, space, settings)),
        cost: 0.0,
    }
    .run(observer)?;
    Ok(outcome(log, None, Vec::new()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::{Evaluation, SurrogateEvaluator, TaskDefinition};

    fn small_arch() -> Architecture {
        Architecture {
            embedding_size: 4,
            hidden_size: 8,
            init_range: 0.05,
        }
    }

    fn evaluator(n_tasks: usize, noise: f64) -> (SearchSpace, SurrogateEvaluator) {
        let space = SearchSpace::from_counts(&[3, 3, 3]).unwrap();
        let tasks = (0..n_tasks)
            .map(|i| TaskDefinition {
                name: format!("task{i}"),
                cluster: 0,
                preferred: vec![i % 3, 1, 2],
                weights: vec![0.3, 0.2, 0.2],
                base: 0.1,
                val_noise: noise,
                test_noise: noise,
                val_size: 1,
                interactions: vec![],
                cost: 1.0,
            })
            .collect();
        (space.clone(), SurrogateEvaluator::new(space, tasks).unwrap())
    }

    fn settings(budget: u64, seed: u64) -> RunSettings {
        let mut s = RunSettings::new(budget, seed);
        s.learner.architecture = small_arch();
        s.learner.learning_rate = 1e-2;
        s
    }

    #[test]
    fn mode_names_round_trip() {
        for m in Mode::ALL {
            assert_eq!(m.as_str().parse::<Mode>().unwrap(), m);
        }
        assert!("nope".parse::<Mode>().is_err());
    }

    #[test]
    fn single_trial_random_search() {
        let (space, ev) = evaluator(1, 0.0);
        let out = run_random_search(&space, &ev, 0, &settings(1, 1), None).unwrap();
        assert_eq!(out.log.len(), 1);
        assert_eq!(out.log.records()[0].trial, 0);
        assert!(out.controller.is_none());
    }

    #[test]
    fn rejects_zero_budget_and_workers() {
        let (space, ev) = evaluator(1, 0.0);
        assert!(matches!(
            run_single_task(&space, &ev, 0, &settings(0, 1), None),
            Err(TrainError::Settings(_))
        ));
        let mut s = settings(3, 1);
        s.parallelism = 0;
        assert!(run_random_search(&space, &ev, 0, &s, None).is_err());
        assert!(run_random_search(&space, &ev, 5, &settings(3, 1), None).is_err());
    }

    #[test]
    fn one_update_per_completion() {
        let (space, ev) = evaluator(1, 0.05);
        let out = run_single_task(&space, &ev, 0, &settings(40, 3), None).unwrap();
        let c = out.controller.unwrap();
        assert_eq!(c.params.version(), 40);
        for (i, r) in out.log.records().iter().enumerate() {
            assert_eq!(r.version, i as u64);
            assert_eq!(r.wall_cost, (i + 1) as f64);
        }
        assert_eq!(out.stats.unwrap().task(0).unwrap().count, 40);
    }

    #[test]
    fn sequential_runs_are_identical() {
        let (space, ev) = evaluator(2, 0.05);
        let a = run_multitask(&space, &ev, &[0, 1], &settings(30, 9), None).unwrap();
        let b = run_multitask(&space, &ev, &[0, 1], &settings(30, 9), None).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.controller, b.controller);
        let c = run_multitask(&space, &ev, &[0, 1], &settings(30, 10), None).unwrap();
        assert_ne!(a.log, c.log);
    }

    #[test]
    fn observer_sees_every_trial() {
        let (space, ev) = evaluator(1, 0.0);
        let mut lines = Vec::new();
        let mut obs = |s: &TrialStatus<'_>| lines.push(s.to_string());
        run_single_task(&space, &ev, 0, &settings(5, 2), Some(&mut obs)).unwrap();
        assert_eq!(lines.len(), 5);
        assert!(lines[0].starts_with("trial 0 task task0 reward"));
        assert!(lines[0].contains(" b ") && lines[0].contains(" sigma ") && lines[0].contains(" adv 0.0000"));
    }

    struct Flaky(SurrogateEvaluator);

    impl Evaluator for Flaky {
        fn n_tasks(&self) -> usize {
            self.0.n_tasks()
        }
        fn task_name(&self, task: usize) -> &str {
            self.0.task_name(task)
        }
        fn evaluate(&self, task: usize, spec: &ModelSpec, seed: u64) -> Result<Evaluation, EvalError> {
            if seed % 3 == 0 {
                Err(EvalError::Failed("child crashed".into()))
            } else {
                self.0.evaluate(task, spec, seed)
            }
        }
    }

    #[test]
    fn failed_trials_do_not_update() {
        let (space, ev) = evaluator(1, 0.05);
        let flaky = Flaky(ev);
        let out = run_single_task(&space, &flaky, 0, &settings(60, 4), None).unwrap();
        let failed = out.log.records().iter().filter(|r| !r.succeeded()).count();
        assert!(failed > 5);
        let c = out.controller.unwrap();
        assert_eq!(c.params.version(), (60 - failed) as u64);
        assert_eq!(out.stats.unwrap().task(0).unwrap().count, (60 - failed) as u64);
        let mut prev = 0;
        for r in out.log.records() {
            assert!(r.version >= prev);
            prev = r.version;
            assert_eq!(r.error.is_some(), !r.succeeded());
        }
    }

    #[test]
    fn parallel_run_respects_staleness_bound() {
        let (space, ev) = evaluator(2, 0.05);
        let mut s = settings(200, 5);
        s.parallelism = 4;
        let out = run_multitask(&space, &ev, &[0, 1], &s, None).unwrap();
        assert_eq!(out.log.len(), 200);
        for (i, r) in out.log.records().iter().enumerate() {
            assert_eq!(r.trial, i as u64);
            assert!(r.version + 4 >= i as u64);
            assert!(r.version <= i as u64);
        }
        assert_eq!(out.controller.unwrap().params.version(), 200);
    }

    #[test]
    fn transfer_appends_one_row() {
        let (space, ev) = evaluator(3, 0.0);
        let pre = run_multitask(&space, &ev, &[0, 1], &settings(20, 1), None).unwrap();
        let source = pre.controller.unwrap();
        let before = source.params.clone();
        let out = run_transfer(&space, &ev, 2, source, &pre.embedding_names, &settings(10, 2), None).unwrap();
        let after = out.controller.unwrap().params;
        assert_eq!(after.n_tasks(), 3);
        assert_eq!(after.task_embedding(0), before.task_embedding(0));
        assert_eq!(after.version(), before.version() + 10);
        assert_eq!(out.embedding_names, vec!["task0", "task1", "task2"]);
        assert!(out.log.records().iter().all(|r| r.task == 2));
    }

    #[test]
    fn frozen_transfer_moves_only_the_new_row() {
        let (space, ev) = evaluator(3, 0.05);
        let pre = run_multitask(&space, &ev, &[0, 1], &settings(20, 1), None).unwrap();
        let source = pre.controller.unwrap();
        let mut s = settings(10, 2);
        s.learner.freeze_shared = true;
        let out = run_transfer(&space, &ev, 2, source.clone(), &[], &s, None).unwrap();
        let after = out.controller.unwrap().params;
        assert_eq!(after.tensors().layers, source.params.tensors().layers);
        assert_eq!(after.task_embedding(1), source.params.task_embedding(1));
    }

    #[test]
    fn fixed_architecture_logs_one_spec() {
        let (space, ev) = evaluator(3, 0.05);
        let pre = run_ablation_no_task_embedding(&space, &ev, AblationPhase::Pretrain { tasks: &[0, 1] }, &settings(30, 1), None)
            .unwrap();
        let params = pre.controller.unwrap().params;
        let out = run_fixed_architecture_transfer(&space, &ev, 2, &params, &settings(15, 2), None).unwrap();
        let first = &out.log.records()[0].spec;
        assert!(out.log.records().iter().all(|r| &r.spec == first));
        assert_eq!(first, &params.modal_spec(TaskInput::Blank).unwrap());
    }

    #[test]
    fn blank_pretraining_leaves_embeddings_alone() {
        let (space, ev) = evaluator(2, 0.05);
        let s = settings(25, 1);
        let out = run_ablation_no_task_embedding(&space, &ev, AblationPhase::Pretrain { tasks: &[0, 1] }, &s, None).unwrap();
        let init = ControllerParams::init(&space, 2, small_arch(), &mut derive_rng(1, seed::CONTROLLER_INIT, 0)).unwrap();
        let p = out.controller.unwrap().params;
        assert_eq!(p.task_embedding(0), init.task_embedding(0));
        assert_ne!(p.tensors().layers, init.tensors().layers);
    }

    #[test]
    fn periodic_checkpoints() {
        let (space, ev) = evaluator(1, 0.0);
        let dir = tempfile::tempdir().unwrap();
        let mut s = settings(10, 1);
        s.checkpoint_every = Some(4);
        s.checkpoint_dir = Some(dir.path().to_path_buf());
        run_single_task(&space, &ev, 0, &s, None).unwrap();
        let mut names: Vec<_> = std::fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        names.sort();
        assert_eq!(names, vec!["checkpoint-00000004.taml", "checkpoint-00000008.taml"]);
    }
}
