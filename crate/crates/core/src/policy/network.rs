//! Forward unroll and reverse-mode gradient of the autoregressive controller.
//!
//! At step `d` the recurrent input is the task embedding concatenated with
//! the embedding of the action taken at step `d - 1` (a learned start vector
//! at `d = 0`). Both recurrent layers run, the input is linearly projected
//! and added to the top layer output, and dimension `d`'s output head turns
//! the result into a softmax over that dimension's options.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{ControllerParams, GradientSet, ParamSet, RecurrentLayer};
use super::tensor::axpy;
use super::PolicyError;
use crate::space::ModelSpec;

/// What occupies the task half of the recurrent input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskInput {
    /// The learned embedding row of this task.
    Task(usize),
    /// A constant zero vector; the controller is task-agnostic.
    Blank,
}

impl From<usize> for TaskInput {
    fn from(task: usize) -> Self {
        TaskInput::Task(task)
    }
}

/// One sampled action sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyRollout {
    pub task: TaskInput,
    pub spec: ModelSpec,
    pub per_step_log_probs: Vec<f64>,
    pub total_log_prob: f64,
    /// Sum of per-step action distribution entropies, in nats.
    pub total_entropy: f64,
    pub parameter_version: u64,
}

/// Teacher-forced score of a given spec.
#[derive(Debug, Clone, PartialEq)]
pub struct LogProb {
    pub total: f64,
    pub per_step: Vec<f64>,
    pub entropy: f64,
}

struct LayerCache {
    /// Layer input followed by the previous hidden state.
    joint: Vec<f64>,
    c_prev: Vec<f64>,
    gates: Vec<f64>,
    c: Vec<f64>,
    tanh_c: Vec<f64>,
    h: Vec<f64>,
}

struct StepCache {
    input: Vec<f64>,
    layers: [LayerCache; 2],
    top: Vec<f64>,
    probs: Vec<f64>,
    log_probs: Vec<f64>,
    entropy: f64,
    action: usize,
}

struct Trace {
    steps: Vec<StepCache>,
}

impl Trace {
    fn actions(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.action).collect()
    }

    fn per_step_log_probs(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.log_probs[s.action]).collect()
    }

    fn entropy(&self) -> f64 {
        self.steps.iter().map(|s| s.entropy).sum()
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn layer_forward(layer: &RecurrentLayer, input: &[f64], h_prev: &[f64], c_prev: &[f64]) -> LayerCache {
    let hidden = h_prev.len();
    let mut joint = Vec::with_capacity(input.len() + hidden);
    joint.extend_from_slice(input);
    joint.extend_from_slice(h_prev);
    let mut gates = layer.bias.data().to_vec();
    layer.weight.matvec_acc(&joint, &mut gates);
    for k in 0..hidden {
        gates[k] = sigmoid(gates[k]);
        gates[hidden + k] = sigmoid(gates[hidden + k]);
        gates[2 * hidden + k] = sigmoid(gates[2 * hidden + k]);
        gates[3 * hidden + k] = gates[3 * hidden + k].tanh();
    }
    let mut c = vec![0.0; hidden];
    let mut tanh_c = vec![0.0; hidden];
    let mut h = vec![0.0; hidden];
    for k in 0..hidden {
        let (i, f, o, g) = (gates[k], gates[hidden + k], gates[2 * hidden + k], gates[3 * hidden + k]);
        c[k] = f * c_prev[k] + i * g;
        tanh_c[k] = c[k].tanh();
        h[k] = o * tanh_c[k];
    }
    LayerCache {
        joint,
        c_prev: c_prev.to_vec(),
        gates,
        c,
        tanh_c,
        h,
    }
}

/// Backpropagates `dh`/`dc` through one cell. Accumulates weight gradients
/// and returns the gradient of the joint input and of the previous cell state.
fn layer_backward(
    layer: &RecurrentLayer,
    cache: &LayerCache,
    dh: &[f64],
    dc: &[f64],
    grad: &mut RecurrentLayer,
) -> (Vec<f64>, Vec<f64>) {
    let hidden = dh.len();
    let g = &cache.gates;
    let mut dz = vec![0.0; 4 * hidden];
    let mut dc_prev = vec![0.0; hidden];
    for k in 0..hidden {
        let (i, f, o, cand) = (g[k], g[hidden + k], g[2 * hidden + k], g[3 * hidden + k]);
        let tc = cache.tanh_c[k];
        let dct = dc[k] + dh[k] * o * (1.0 - tc * tc);
        dz[k] = dct * cand * i * (1.0 - i);
        dz[hidden + k] = dct * cache.c_prev[k] * f * (1.0 - f);
        dz[2 * hidden + k] = dh[k] * tc * o * (1.0 - o);
        dz[3 * hidden + k] = dct * i * (1.0 - cand * cand);
        dc_prev[k] = dct * f;
    }
    debug_assert_eq!(cache.c.len(), hidden);
    grad.weight.outer_acc(&dz, &cache.joint);
    axpy(1.0, &dz, grad.bias.data_mut());
    let mut djoint = vec![0.0; cache.joint.len()];
    layer.weight.t_matvec_acc(&dz, &mut djoint);
    (djoint, dc_prev)
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

impl ControllerParams {
    fn check_input(&self, task: TaskInput) -> Result<(), PolicyError> {
        match task {
            TaskInput::Task(t) => self.check_task(t),
            TaskInput::Blank => Ok(()),
        }
    }

    fn check_spec(&self, spec: &ModelSpec) -> Result<(), PolicyError> {
        if spec.len() != self.option_counts.len() {
            return Err(PolicyError::InvalidSpec(format!(
                "spec has {} choices, controller has {} dimensions",
                spec.len(),
                self.option_counts.len()
            )));
        }
        for (d, (&c, &n)) in spec.choices.iter().zip(&self.option_counts).enumerate() {
            if c >= n {
                return Err(PolicyError::InvalidSpec(format!(
                    "choice {c} out of range for dimension {d} ({n} options)"
                )));
            }
        }
        Ok(())
    }

    /// Runs the controller for every dimension, letting `choose` pick each
    /// action from the step's probabilities.
    fn unroll(&self, task: TaskInput, mut choose: impl FnMut(usize, &[f64]) -> usize) -> Trace {
        let p = &self.tensors;
        let e = self.arch.embedding_size;
        let h = self.arch.hidden_size;
        let mut h_state = [vec![0.0; h], vec![0.0; h]];
        let mut c_state = [vec![0.0; h], vec![0.0; h]];
        let mut steps: Vec<StepCache> = Vec::with_capacity(self.option_counts.len());
        for d in 0..self.option_counts.len() {
            let mut input = Vec::with_capacity(2 * e);
            match task {
                TaskInput::Task(t) => input.extend_from_slice(p.task_embeddings.row(t)),
                TaskInput::Blank => input.resize(e, 0.0),
            }
            match steps.last() {
                None => input.extend_from_slice(p.start_embedding.row(0)),
                Some(prev) => input.extend_from_slice(p.action_embeddings[d - 1].row(prev.action)),
            }
            let l0 = layer_forward(&p.layers[0], &input, &h_state[0], &c_state[0]);
            let l1 = layer_forward(&p.layers[1], &l0.h, &h_state[1], &c_state[1]);
            let mut top = l1.h.clone();
            p.skip.matvec_acc(&input, &mut top);
            let mut logits = p.output_biases[d].data().to_vec();
            p.output_weights[d].matvec_acc(&top, &mut logits);
            let log_probs = log_softmax(&logits);
            let probs: Vec<f64> = log_probs.iter().map(|l| l.exp()).collect();
            let entropy = -probs.iter().zip(&log_probs).map(|(p, l)| p * l).sum::<f64>();
            let action = choose(d, &probs);
            h_state = [l0.h.clone(), l1.h.clone()];
            c_state = [l0.c.clone(), l1.c.clone()];
            steps.push(StepCache {
                input,
                layers: [l0, l1],
                top,
                probs,
                log_probs,
                entropy,
                action,
            });
        }
        Trace { steps }
    }

    fn forced_trace(&self, task: TaskInput, spec: &ModelSpec) -> Result<Trace, PolicyError> {
        self.check_input(task)?;
        self.check_spec(spec)?;
        Ok(self.unroll(task, |d, _| spec.choices[d]))
    }

    /// Samples one action per dimension from the current policy.
    pub fn sample_rollout<R: Rng + ?Sized>(
        &self,
        task: impl Into<TaskInput>,
        rng: &mut R,
    ) -> Result<PolicyRollout, PolicyError> {
        let task = task.into();
        self.check_input(task)?;
        let trace = self.unroll(task, |_, probs| sample_index(probs, rng.random::<f64>()));
        let per_step_log_probs = trace.per_step_log_probs();
        Ok(PolicyRollout {
            task,
            spec: ModelSpec::new(trace.actions()),
            total_log_prob: per_step_log_probs.iter().sum(),
            per_step_log_probs,
            total_entropy: trace.entropy(),
            parameter_version: self.version,
        })
    }

    pub fn log_prob(&self, task: impl Into<TaskInput>, spec: &ModelSpec) -> Result<LogProb, PolicyError> {
        let trace = self.forced_trace(task.into(), spec)?;
        let per_step = trace.per_step_log_probs();
        Ok(LogProb {
            total: per_step.iter().sum(),
            per_step,
            entropy: trace.entropy(),
        })
    }

    /// Per-step action distributions along a teacher-forced spec. Entry `d`
    /// is conditioned on `spec.choices[..d]`.
    pub fn step_distributions(
        &self,
        task: impl Into<TaskInput>,
        spec: &ModelSpec,
    ) -> Result<Vec<Vec<f64>>, PolicyError> {
        let trace = self.forced_trace(task.into(), spec)?;
        Ok(trace.steps.into_iter().map(|s| s.probs).collect())
    }

    /// Distribution over the first dimension, which does not depend on any
    /// earlier action and is therefore an exact marginal.
    pub fn first_marginal(&self, task: impl Into<TaskInput>) -> Result<Vec<f64>, PolicyError> {
        let task = task.into();
        self.check_input(task)?;
        let trace = self.unroll(task, |_, _| 0);
        Ok(trace.steps.into_iter().next().map(|s| s.probs).unwrap_or_default())
    }

    /// Greedy decode: the most likely action at every step (lowest index on ties).
    pub fn modal_spec(&self, task: impl Into<TaskInput>) -> Result<ModelSpec, PolicyError> {
        let task = task.into();
        self.check_input(task)?;
        let trace = self.unroll(task, |_, probs| argmax(probs));
        Ok(ModelSpec::new(trace.actions()))
    }

    /// Exact gradient of
    /// `coefficient * log pi(spec | task) + entropy_weight * sum_d H_d`
    /// where `H_d` is the entropy of the step-`d` action distribution along
    /// the trajectory of `spec`.
    pub fn policy_gradient(
        &self,
        task: impl Into<TaskInput>,
        spec: &ModelSpec,
        coefficient: f64,
        entropy_weight: f64,
    ) -> Result<GradientSet, PolicyError> {
        if !coefficient.is_finite() || !entropy_weight.is_finite() {
            return Err(PolicyError::NonFiniteCoefficient);
        }
        let task = task.into();
        let trace = self.forced_trace(task, spec)?;
        let mut grad = ParamSet::zeros(&self.arch, &self.option_counts, self.n_tasks());
        if coefficient == 0.0 && entropy_weight == 0.0 {
            return Ok(GradientSet(grad));
        }
        let p = &self.tensors;
        let e = self.arch.embedding_size;
        let h = self.arch.hidden_size;
        let input_size = self.arch.input_size();
        let mut dh_carry = [vec![0.0; h], vec![0.0; h]];
        let mut dc_carry = [vec![0.0; h], vec![0.0; h]];
        for (d, step) in trace.steps.iter().enumerate().rev() {
            let dlogits: Vec<f64> = step
                .probs
                .iter()
                .zip(&step.log_probs)
                .enumerate()
                .map(|(k, (&pk, &lk))| {
                    let onehot = if k == step.action { 1.0 } else { 0.0 };
                    coefficient * (onehot - pk) - entropy_weight * pk * (lk + step.entropy)
                })
                .collect();
            grad.output_weights[d].outer_acc(&dlogits, &step.top);
            axpy(1.0, &dlogits, grad.output_biases[d].data_mut());
            let mut dtop = vec![0.0; h];
            p.output_weights[d].t_matvec_acc(&dlogits, &mut dtop);

            grad.skip.outer_acc(&dtop, &step.input);
            let mut dinput = vec![0.0; input_size];
            p.skip.t_matvec_acc(&dtop, &mut dinput);

            let mut dh1 = dtop;
            axpy(1.0, &dh_carry[1], &mut dh1);
            let (djoint1, dc1_prev) =
                layer_backward(&p.layers[1], &step.layers[1], &dh1, &dc_carry[1], &mut grad.layers[1]);
            dh_carry[1] = djoint1[h..].to_vec();
            dc_carry[1] = dc1_prev;

            let mut dh0 = djoint1[..h].to_vec();
            axpy(1.0, &dh_carry[0], &mut dh0);
            let (djoint0, dc0_prev) =
                layer_backward(&p.layers[0], &step.layers[0], &dh0, &dc_carry[0], &mut grad.layers[0]);
            dh_carry[0] = djoint0[input_size..].to_vec();
            dc_carry[0] = dc0_prev;
            axpy(1.0, &djoint0[..input_size], &mut dinput);

            if let TaskInput::Task(t) = task {
                axpy(1.0, &dinput[..e], grad.task_embeddings.row_mut(t));
            }
            if d == 0 {
                axpy(1.0, &dinput[e..], grad.start_embedding.row_mut(0));
            } else {
                let prev = trace.steps[d - 1].action;
                axpy(1.0, &dinput[e..], grad.action_embeddings[d - 1].row_mut(prev));
            }
        }
        if !grad.is_finite() {
            return Err(PolicyError::NonFiniteGradient);
        }
        Ok(GradientSet(grad))
    }
}

fn sample_index(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding left `acc` slightly below 1; fall back to the last option with mass
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
