use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use taml::config::{ConfigError, Overrides, ResolvedConfig, RunConfig};
use taml::metrics::{
    accuracy_top_n, embedding_similarity, export_learning_curve, export_similarity_csv, MetricsError, TrialLog,
};
use taml::policy::{checkpoint_load, checkpoint_save, inspect_checkpoint, CheckpointError, PolicyError};
use taml::trainer::{
    run_ablation_no_task_embedding, run_fixed_architecture_transfer, run_multitask, run_random_search,
    run_single_task, run_transfer, AblationPhase, Controller, Mode, RunOutcome, TrainError, TrialStatus,
};

/// Default output root when neither `--out` nor `TAML_OUT` is set.
const DEFAULT_OUT: &str = "runs";

pub const TRIALS_FILE: &str = "trials.jsonl";
pub const CONFIG_FILE: &str = "config.resolved.toml";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.final.taml";

#[derive(Debug, Parser)]
#[command(name = "taml", version, about = "Multitask controller search over surrogate tasks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a search and write its artifacts to a new run directory.
    Run(RunArgs),
    /// Print the header of a controller checkpoint.
    InspectCheckpoint {
        path: PathBuf,
    },
    /// Learning-curve CSV of a finished trial log.
    Metrics {
        /// A trials.jsonl file or a run directory containing one.
        log: PathBuf,
        #[arg(long, default_value_t = taml::metrics::DEFAULT_TOP_N)]
        top_n: usize,
        #[arg(long, default_value_t = taml::metrics::DEFAULT_STRIDE)]
        stride: usize,
        /// Write the CSV here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parse and resolve a config without writing anything.
    ValidateConfig(ConfigArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub budget: Option<u64>,
    #[arg(long)]
    pub parallelism: Option<usize>,
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub from_checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Output root; the run directory is created inside it.
    #[arg(long, env = "TAML_OUT")]
    pub out: Option<PathBuf>,
    /// Suppress the per-trial status lines on standard error.
    #[arg(long, short)]
    pub quiet: bool,
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse()
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::SpaceMismatch { .. } => CliError::Config(e.to_string()),
            _ => CliError::Io(e.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Settings(_) => CliError::Config(e.to_string()),
            TrainError::Checkpoint(c) => c.into(),
            TrainError::Log(MetricsError::Io(_)) => CliError::Io(e.to_string()),
            _ => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<PolicyError> for CliError {
    fn from(e: PolicyError) -> Self {
        CliError::Numeric(e.to_string())
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |e| CliError::Io(format!("{}: {e}", path.display()))
}

pub fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run(args) => run(args),
        Command::InspectCheckpoint { path } => inspect(&path),
        Command::Metrics {
            log,
            top_n,
            stride,
            out,
        } => metrics(&log, top_n, stride, out.as_deref()),
        Command::ValidateConfig(args) => validate(&args),
    }
}

fn load(args: &ConfigArgs) -> Result<ResolvedConfig, CliError> {
    let mut cfg = RunConfig::load(&args.config)?;
    cfg.apply(&Overrides {
        mode: args.mode,
        seed: args.seed,
        budget: args.budget,
        parallelism: args.parallelism,
        from_checkpoint: args.from_checkpoint.clone(),
    });
    Ok(cfg.resolve()?)
}

fn validate(args: &ConfigArgs) -> Result<(), CliError> {
    let r = load(args)?;
    let run = &r.config.run;
    println!("config ok: {}", args.config.display());
    println!("mode {} budget {} parallelism {} seed {}", run.mode, run.budget, run.parallelism, run.seed);
    println!(
        "space: {} dimensions, {} specs, hash {}",
        r.space.len(),
        r.space.cardinality(),
        r.space.content_hash_hex()
    );
    println!("tasks: {}", taml::task::Evaluator::n_tasks(&r.evaluator));
    if let Some(path) = &run.from_checkpoint {
        let h = inspect_checkpoint(path)?;
        if h.space_hash != r.space.content_hash() {
            return Err(CliError::Config(format!(
                "{}: checkpoint was trained on a different search space",
                path.display()
            )));
        }
        println!("checkpoint ok: {} ({} task rows)", path.display(), h.n_tasks);
    }
    println!("digest {}", r.config.digest());
    Ok(())
}

fn inspect(path: &Path) -> Result<(), CliError> {
    let h = inspect_checkpoint(path)?;
    println!("format_version: {}", h.format_version);
    println!("n_tasks: {}", h.n_tasks);
    println!("dimensions: {}", h.option_counts.len());
    println!(
        "option_counts: {}",
        h.option_counts.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",")
    );
    println!("embedding_size: {}", h.architecture.embedding_size);
    println!("hidden_size: {}", h.architecture.hidden_size);
    println!("parameter_version: {}", h.parameter_version);
    println!("optimizer: {:?} (step {})", h.optimizer, h.optimizer_step);
    println!("space_hash: {}", hex::encode(h.space_hash));
    Ok(())
}

fn trial_log_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(TRIALS_FILE)
    } else {
        p.to_path_buf()
    }
}

fn metrics(log: &Path, top_n: usize, stride: usize, out: Option<&Path>) -> Result<(), CliError> {
    if top_n == 0 || stride == 0 {
        return Err(CliError::Config("--top-n and --stride must be at least 1".into()));
    }
    let path = trial_log_path(log);
    let log = TrialLog::load(&path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let csv = export_learning_curve(log.records(), top_n, stride)?;
    match out {
        Some(p) => fs::write(p, csv).map_err(io_err(p))?,
        None => io::stdout().write_all(csv.as_bytes()).map_err(io_err(Path::new("<stdout>")))?,
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub mode: String,
    pub seed: u64,
    pub budget: u64,
    pub space_hash: String,
    pub config_digest: String,
    /// Names of the controller's task embedding rows, in row order.
    pub embedding_names: Vec<String>,
    pub files: Vec<ManifestEntry>,
}

fn run_dir_name(r: &ResolvedConfig) -> String {
    let digest = r.config.digest();
    format!("{}-seed{}-{}", r.config.run.mode, r.config.run.seed, &digest[..12])
}

/// Embedding names recorded next to a source checkpoint, if any.
fn source_names(checkpoint: &Path) -> Vec<String> {
    let manifest = checkpoint.with_file_name(MANIFEST_FILE);
    fs::read_to_string(manifest)
        .ok()
        .and_then(|s| serde_json::from_str::<Manifest>(&s).ok())
        .map(|m| m.embedding_names)
        .unwrap_or_default()
}

fn load_source(r: &ResolvedConfig) -> Result<(Controller, Vec<String>), CliError> {
    let path = r
        .config
        .run
        .from_checkpoint
        .as_ref()
        .ok_or_else(|| CliError::Config("run.from_checkpoint is required for this mode".into()))?;
    let (params, optimizer) = checkpoint_load(path, &r.space)?;
    Ok((Controller { params, optimizer }, source_names(path)))
}

fn run(args: RunArgs) -> Result<(), CliError> {
    let r = load(&args.config)?;
    let root = args.out.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    let dir = root.join(run_dir_name(&r));
    if dir.join(TRIALS_FILE).exists() {
        return Err(CliError::Io(format!("{}: run directory already holds a trial log", dir.display())));
    }
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let config_path = dir.join(CONFIG_FILE);
    fs::write(&config_path, r.config.to_toml()).map_err(io_err(&config_path))?;

    let mut settings = r.config.settings();
    if settings.checkpoint_every.is_some() {
        let ck = dir.join("checkpoints");
        fs::create_dir_all(&ck).map_err(io_err(&ck))?;
        settings.checkpoint_dir = Some(ck);
    }
    let quiet = args.quiet;
    let mut status = |s: &TrialStatus| {
        if !quiet {
            eprintln!("{s}");
        }
    };
    let obs = Some(&mut status as &mut dyn FnMut(&TrialStatus));
    let (space, ev) = (&r.space, &r.evaluator);
    let target = r.target.unwrap_or(0);
    let mode = r.config.run.mode;
    let outcome: RunOutcome = match mode {
        Mode::Random => run_random_search(space, ev, target, &settings, obs)?,
        Mode::SingleTask => run_single_task(space, ev, target, &settings, obs)?,
        Mode::Multitask => run_multitask(space, ev, &r.pretrain_tasks, &settings, obs)?,
        Mode::Transfer => {
            let (source, names) = load_source(&r)?;
            run_transfer(space, ev, target, source, &names, &settings, obs)?
        }
        Mode::AblateNoTaskEmbedding => {
            let phase = match r.target {
                Some(task) => AblationPhase::Transfer {
                    task,
                    source: load_source(&r)?.0,
                },
                None => AblationPhase::Pretrain {
                    tasks: &r.pretrain_tasks,
                },
            };
            run_ablation_no_task_embedding(space, ev, phase, &settings, obs)?
        }
        Mode::AblateFixedArchitecture => {
            let (source, _) = load_source(&r)?;
            run_fixed_architecture_transfer(space, ev, target, &source.params, &settings, obs)?
        }
    };

    let trials = dir.join(TRIALS_FILE);
    outcome.log.save(&trials).map_err(|e| CliError::Io(format!("{}: {e}", trials.display())))?;
    if let Some(c) = &outcome.controller {
        let path = dir.join(CHECKPOINT_FILE);
        checkpoint_save(&c.params, &c.optimizer, &space.content_hash(), &path)?;
        if matches!(mode, Mode::Multitask | Mode::Transfer) {
            let csv = export_similarity_csv(&outcome.embedding_names, &embedding_similarity(&c.params));
            let p = dir.join("embedding_similarity.csv");
            fs::write(&p, csv).map_err(io_err(&p))?;
        }
    }
    if let Some(stats) = &outcome.stats {
        let p = dir.join("stats.json");
        let json = serde_json::to_string_pretty(stats).expect("stats serialize");
        fs::write(&p, json).map_err(io_err(&p))?;
    }
    let m = &r.config.metrics;
    let summary = match export_learning_curve(outcome.log.records(), m.top_n, m.stride) {
        Ok(csv) => {
            let p = dir.join("learning_curve.csv");
            fs::write(&p, csv).map_err(io_err(&p))?;
            let top = accuracy_top_n(outcome.log.records(), m.top_n, None)?;
            format!("top{} val {:.4} test {:.4}", m.top_n, top.val, top.test)
        }
        Err(MetricsError::EmptyLog) => "no successful trials".to_string(),
        Err(e) => return Err(e.into()),
    };
    write_manifest(&dir, &r, &outcome)?;

    let failed = outcome.log.records().iter().filter(|t| !t.succeeded()).count();
    println!("run directory: {}", dir.display());
    println!("trials: {} ({failed} failed); {summary}", outcome.log.len());
    Ok(())
}

fn files_under(dir: &Path, base: &Path, out: &mut Vec<PathBuf>) -> io::Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            files_under(&path, base, out)?;
        } else if !(path.parent() == Some(base) && path.file_name().is_some_and(|n| n == MANIFEST_FILE)) {
            out.push(path);
        }
    }
    Ok(())
}

fn write_manifest(dir: &Path, r: &ResolvedConfig, outcome: &RunOutcome) -> Result<(), CliError> {
    let mut paths = vec![];
    files_under(dir, dir, &mut paths).map_err(io_err(dir))?;
    paths.sort();
    let mut files = vec![];
    for p in paths {
        let bytes = fs::read(&p).map_err(io_err(&p))?;
        let rel = p.strip_prefix(dir).expect("inside run dir");
        files.push(ManifestEntry {
            path: rel.to_string_lossy().replace('\\', "/"),
            sha256: hex::encode(Sha256::digest(&bytes)),
            bytes: bytes.len() as u64,
        });
    }
    let manifest = Manifest {
        format: "taml-run/1".into(),
        mode: r.config.run.mode.to_string(),
        seed: r.config.run.seed,
        budget: r.config.run.budget,
        space_hash: r.space.content_hash_hex(),
        config_digest: r.config.digest(),
        embedding_names: outcome.embedding_names.clone(),
        files,
    };
    let p = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&p, json + "\n").map_err(io_err(&p))
}
