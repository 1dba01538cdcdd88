use serde::{Deserialize, Serialize};

use super::params::{ControllerParams, GradientSet, ParamSet};
use super::PolicyError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

/// Which tensors an update may touch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum UpdateScope {
    #[default]
    All,
    /// Only the task embedding table moves; shared weights stay frozen.
    TaskEmbeddingsOnly,
}

/// Optimizer state. Adam keeps first and second moment estimates shaped like
/// the parameters; SGD keeps nothing but the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub step: u64,
    pub moments: Option<(ParamSet, ParamSet)>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, params: &ControllerParams) -> Self {
        let moments = match kind {
            OptimizerKind::Adam => Some((params.tensors.zeros_like(), params.tensors.zeros_like())),
            OptimizerKind::Sgd => None,
        };
        Self { kind, step: 0, moments }
    }

    /// Appends zero moment rows so the state matches a controller that just
    /// gained a task embedding.
    pub fn grow_task_rows(&mut self, n_tasks: usize) {
        if let Some((m, v)) = &mut self.moments {
            for t in [&mut m.task_embeddings, &mut v.task_embeddings] {
                while t.rows() < n_tasks {
                    let zeros = vec![0.0; t.cols()];
                    t.push_row(&zeros);
                }
            }
        }
    }
}

/// Gradient ascent step on the controller objective. Bumps the parameter
/// version; on any error the parameters and optimizer state are unchanged.
pub fn apply_update(
    params: &mut ControllerParams,
    grads: &GradientSet,
    state: &mut OptimizerState,
    learning_rate: f64,
) -> Result<(), PolicyError> {
    apply_scoped_update(params, grads, state, learning_rate, UpdateScope::All)
}

pub fn apply_scoped_update(
    params: &mut ControllerParams,
    grads: &GradientSet,
    state: &mut OptimizerState,
    learning_rate: f64,
    scope: UpdateScope,
) -> Result<(), PolicyError> {
    if !params.tensors.same_shape(&grads.0) {
        return Err(PolicyError::ShapeMismatch);
    }
    if let Some((m, _)) = &state.moments {
        if !params.tensors.same_shape(m) {
            return Err(PolicyError::ShapeMismatch);
        }
    }
    if !grads.0.is_finite() || !learning_rate.is_finite() {
        return Err(PolicyError::NonFiniteUpdate);
    }
    let step = state.step + 1;
    // Dry run first so a non-finite result leaves everything untouched.
    if !ascend(params, grads, state, learning_rate, scope, step, false) {
        return Err(PolicyError::NonFiniteUpdate);
    }
    ascend(params, grads, state, learning_rate, scope, step, true);
    params.version += 1;
    state.step = step;
    Ok(())
}

/// Computes the update for every element; writes it back only when `commit`
/// is set. Returns whether every new value is finite.
fn ascend(
    params: &mut ControllerParams,
    grads: &GradientSet,
    state: &mut OptimizerState,
    learning_rate: f64,
    scope: UpdateScope,
    step: u64,
    commit: bool,
) -> bool {
    let task_index = params.tensors.task_embedding_index();
    let targets = params.tensors.tensors_mut();
    let grad_tensors = grads.0.tensors();
    let mut finite = true;
    match &mut state.moments {
        None => {
            for (i, (p, g)) in targets.into_iter().zip(grad_tensors).enumerate() {
                if scope == UpdateScope::TaskEmbeddingsOnly && i != task_index {
                    continue;
                }
                for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
                    let next = *pv + learning_rate * gv;
                    finite &= next.is_finite();
                    if commit {
                        *pv = next;
                    }
                }
            }
        }
        Some((m, v)) => {
            let bias1 = 1.0 - ADAM_BETA1.powf(step as f64);
            let bias2 = 1.0 - ADAM_BETA2.powf(step as f64);
            let iter = targets
                .into_iter()
                .zip(grad_tensors)
                .zip(m.tensors_mut())
                .zip(v.tensors_mut())
                .enumerate();
            for (i, (((p, g), m), v)) in iter {
                if scope == UpdateScope::TaskEmbeddingsOnly && i != task_index {
                    continue;
                }
                // Task embedding rows are updated lazily: a row whose gradient
                // is zero keeps its value and its moments.
                let cols = g.cols().max(1);
                let active: Vec<bool> = if i == task_index {
                    g.data().chunks(cols).map(|r| r.iter().any(|x| *x != 0.0)).collect()
                } else {
                    vec![true; g.rows()]
                };
                let values = p.data_mut().iter_mut().zip(g.data());
                for (k, ((pv, gv), (mv, vv))) in values.zip(m.data_mut().iter_mut().zip(v.data_mut())).enumerate() {
                    if !active[k / cols] {
                        continue;
                    }
                    let m_next = ADAM_BETA1 * *mv + (1.0 - ADAM_BETA1) * gv;
                    let v_next = ADAM_BETA2 * *vv + (1.0 - ADAM_BETA2) * gv * gv;
                    let next = *pv + learning_rate * (m_next / bias1) / ((v_next / bias2).sqrt() + ADAM_EPSILON);
                    finite &= next.is_finite();
                    if commit {
                        *mv = m_next;
                        *vv = v_next;
                        *pv = next;
                    }
                }
            }
        }
    }
    finite
}
