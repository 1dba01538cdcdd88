//! WebAssembly bindings for a static demo page. Every export takes and
//! returns JSON or TOML text; the plain `*_json` functions hold the logic so
//! they can be tested natively.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use taml::config::RunConfig;
use taml::metrics::{embedding_similarity, learning_curve, CurvePoint};
use taml::space::SearchSpace;
use taml::task::Evaluator;
use taml::trainer::{run_multitask, run_random_search, run_single_task, Mode};

/// Largest budget the page will run in one call.
pub const MAX_BUDGET: u64 = 5000;

#[derive(Serialize)]
struct DimensionInfo {
    name: String,
    options: Vec<String>,
}

#[derive(Serialize)]
struct PresetInfo {
    name: String,
    cardinality: String,
    dimensions: Vec<DimensionInfo>,
}

#[derive(Serialize)]
struct Point {
    trials: usize,
    val: f64,
    test: f64,
}

impl From<CurvePoint> for Point {
    fn from(p: CurvePoint) -> Self {
        Point {
            trials: p.trials,
            val: p.val,
            test: p.test,
        }
    }
}

#[derive(Serialize)]
struct RunSummary {
    mode: String,
    trials: usize,
    curve: Vec<Point>,
    best_spec: Vec<String>,
    task_names: Vec<String>,
    similarity: Option<Vec<Vec<f64>>>,
}

pub fn preset_info_json(name: &str) -> Result<String, String> {
    let space = SearchSpace::preset(name).map_err(|e| e.to_string())?;
    let info = PresetInfo {
        name: name.to_string(),
        // Cardinalities can exceed what a JS number holds exactly.
        cardinality: space.cardinality().to_string(),
        dimensions: space
            .dimensions()
            .iter()
            .map(|d| DimensionInfo {
                name: d.name.clone(),
                options: d.options.clone(),
            })
            .collect(),
    };
    Ok(serde_json::to_string(&info).expect("serializes"))
}

pub fn validate_config_json(toml_src: &str) -> Result<String, String> {
    let cfg = RunConfig::from_toml(toml_src, "config").map_err(|e| e.to_string())?;
    let r = cfg.resolve().map_err(|e| e.to_string())?;
    Ok(serde_json::json!({
        "mode": r.config.run.mode.as_str(),
        "budget": r.config.run.budget,
        "tasks": r.evaluator.n_tasks(),
        "cardinality": r.space.cardinality().to_string(),
        "digest": r.config.digest(),
    })
    .to_string())
}

/// Runs random search, single-task or multitask search in the calling thread.
pub fn run_config_json(toml_src: &str) -> Result<String, String> {
    let mut cfg = RunConfig::from_toml(toml_src, "config").map_err(|e| e.to_string())?;
    cfg.run.parallelism = 1;
    if cfg.run.budget > MAX_BUDGET {
        return Err(format!("budget is capped at {MAX_BUDGET} in the browser"));
    }
    let r = cfg.resolve().map_err(|e| e.to_string())?;
    let settings = r.config.settings();
    let (space, ev) = (&r.space, &r.evaluator);
    let mode = r.config.run.mode;
    let outcome = match mode {
        Mode::Random => run_random_search(space, ev, r.target.unwrap_or(0), &settings, None),
        Mode::SingleTask => run_single_task(space, ev, r.target.unwrap_or(0), &settings, None),
        Mode::Multitask => run_multitask(space, ev, &r.pretrain_tasks, &settings, None),
        other => return Err(format!("mode {other} needs a checkpoint and is not available here")),
    }
    .map_err(|e| e.to_string())?;
    let m = &r.config.metrics;
    let records = outcome.log.records();
    let curve = learning_curve(records, m.top_n, m.stride).map_err(|e| e.to_string())?;
    let best = records
        .iter()
        .filter(|t| t.val.is_some())
        .max_by(|a, b| a.val.unwrap().total_cmp(&b.val.unwrap()).then(b.trial.cmp(&a.trial)));
    let best_spec = match best {
        Some(t) => space
            .spec_to_labels(&t.spec)
            .map_err(|e| e.to_string())?
            .into_iter()
            .map(|(d, o)| format!("{d}={o}"))
            .collect(),
        None => vec![],
    };
    let similarity = match (&outcome.controller, mode) {
        (Some(c), Mode::Multitask) => Some(embedding_similarity(&c.params)),
        _ => None,
    };
    let summary = RunSummary {
        mode: mode.as_str().to_string(),
        trials: records.len(),
        curve: curve.into_iter().map(Point::from).collect(),
        best_spec,
        task_names: outcome.embedding_names,
        similarity,
    };
    Ok(serde_json::to_string(&summary).expect("serializes"))
}

#[wasm_bindgen]
pub fn preset_info(name: &str) -> Result<String, JsError> {
    preset_info_json(name).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn validate_config(toml_src: &str) -> Result<String, JsError> {
    validate_config_json(toml_src).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn run_config(toml_src: &str) -> Result<String, JsError> {
    run_config_json(toml_src).map_err(|e| JsError::new(&e))
}
