use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::{uniform_scalar, Tensor};
use super::PolicyError;
use crate::space::SearchSpace;

/// Controller layer sizes and initialization range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Architecture {
    /// Size of both the action and the task embeddings.
    pub embedding_size: usize,
    /// Units per recurrent layer.
    pub hidden_size: usize,
    /// Every parameter starts as a draw from `U[-init_range, init_range]`.
    pub init_range: f64,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            embedding_size: 25,
            hidden_size: 50,
            init_range: 0.05,
        }
    }
}

impl Architecture {
    /// Width of the recurrent input: task embedding followed by the previous
    /// action embedding.
    pub fn input_size(&self) -> usize {
        2 * self.embedding_size
    }
}

/// Weights of one gated recurrent layer. Rows of `weight` are grouped as
/// input, forget, output and candidate gates; columns as layer input followed
/// by the previous hidden state.
#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Every trainable tensor of the controller. Also used as the shape of
/// gradients and optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub start_embedding: Tensor,
    pub action_embeddings: Vec<Tensor>,
    pub task_embeddings: Tensor,
    pub layers: [RecurrentLayer; 2],
    pub skip: Tensor,
    pub output_weights: Vec<Tensor>,
    pub output_biases: Vec<Tensor>,
}

impl ParamSet {
    pub fn zeros(arch: &Architecture, option_counts: &[usize], n_tasks: usize) -> Self {
        let e = arch.embedding_size;
        let h = arch.hidden_size;
        let input = arch.input_size();
        Self {
            start_embedding: Tensor::zeros(1, e),
            action_embeddings: option_counts.iter().map(|&n| Tensor::zeros(n, e)).collect(),
            task_embeddings: Tensor::zeros(n_tasks, e),
            layers: [
                RecurrentLayer {
                    weight: Tensor::zeros(4 * h, input + h),
                    bias: Tensor::zeros(1, 4 * h),
                },
                RecurrentLayer {
                    weight: Tensor::zeros(4 * h, 2 * h),
                    bias: Tensor::zeros(1, 4 * h),
                },
            ],
            skip: Tensor::zeros(h, input),
            output_weights: option_counts.iter().map(|&n| Tensor::zeros(n, h)).collect(),
            output_biases: option_counts.iter().map(|&n| Tensor::zeros(1, n)).collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        out.tensors_mut().into_iter().for_each(|t| t.fill(0.0));
        out
    }

    /// Canonical tensor order with stable names. Checkpoints and
    /// initialization both follow this order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("start_embedding".to_string(), &self.start_embedding)];
        for (d, t) in self.action_embeddings.iter().enumerate() {
            out.push((format!("action_embedding.{d}"), t));
        }
        out.push(("task_embedding".to_string(), &self.task_embeddings));
        for (l, layer) in self.layers.iter().enumerate() {
            out.push((format!("recurrent.{l}.weight"), &layer.weight));
            out.push((format!("recurrent.{l}.bias"), &layer.bias));
        }
        out.push(("skip.weight".to_string(), &self.skip));
        for (d, (w, b)) in self.output_weights.iter().zip(&self.output_biases).enumerate() {
            out.push((format!("output.{d}.weight"), w));
            out.push((format!("output.{d}.bias"), b));
        }
        out
    }

    /// Same order as [`ParamSet::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.start_embedding];
        out.extend(self.action_embeddings.iter_mut());
        out.push(&mut self.task_embeddings);
        for layer in self.layers.iter_mut() {
            out.push(&mut layer.weight);
            out.push(&mut layer.bias);
        }
        out.push(&mut self.skip);
        for (w, b) in self.output_weights.iter_mut().zip(self.output_biases.iter_mut()) {
            out.push(w);
            out.push(b);
        }
        out
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.named().into_iter().map(|(_, t)| t).collect()
    }

    /// Index of the task embedding table in the canonical order.
    pub(crate) fn task_embedding_index(&self) -> usize {
        1 + self.action_embeddings.len()
    }

    pub fn same_shape(&self, other: &ParamSet) -> bool {
        let a = self.tensors();
        let b = other.tensors();
        a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.shape() == y.shape())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.data().len()).sum()
    }

    /// Rebuilds a set from `(name, tensor)` pairs in canonical order,
    /// checking every name and shape.
    pub(crate) fn from_named(
        arch: &Architecture,
        option_counts: &[usize],
        n_tasks: usize,
        named: Vec<(String, Tensor)>,
    ) -> Result<Self, String> {
        let mut set = Self::zeros(arch, option_counts, n_tasks);
        let expected: Vec<(String, (usize, usize))> =
            set.named().into_iter().map(|(n, t)| (n, t.shape())).collect();
        if expected.len() != named.len() {
            return Err(format!("expected {} tensors, found {}", expected.len(), named.len()));
        }
        for ((slot, (name, shape)), (got_name, tensor)) in
            set.tensors_mut().into_iter().zip(expected).zip(named)
        {
            if name != got_name {
                return Err(format!("expected tensor `{name}`, found `{got_name}`"));
            }
            if tensor.shape() != shape {
                return Err(format!(
                    "tensor `{name}` has shape {:?}, expected {shape:?}",
                    tensor.shape()
                ));
            }
            *slot = tensor;
        }
        Ok(set)
    }
}

/// Gradient of the controller objective, shape-matched to [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet(pub ParamSet);

impl GradientSet {
    pub fn tensors(&self) -> &ParamSet {
        &self.0
    }

    pub fn is_zero(&self) -> bool {
        self.0.tensors().iter().all(|t| t.data().iter().all(|&v| v == 0.0))
    }
}

/// Trainable controller state plus the bookkeeping needed to interpret it.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerParams {
    pub(crate) arch: Architecture,
    pub(crate) option_counts: Vec<usize>,
    pub(crate) tensors: ParamSet,
    pub(crate) version: u64,
}

impl ControllerParams {
    /// Draws every parameter uniformly from `[-init_range, init_range]`.
    pub fn init<R: Rng + ?Sized>(
        space: &SearchSpace,
        n_tasks: usize,
        arch: Architecture,
        rng: &mut R,
    ) -> Result<Self, PolicyError> {
        if n_tasks == 0 {
            return Err(PolicyError::NoTasks);
        }
        if arch.embedding_size == 0 || arch.hidden_size == 0 {
            return Err(PolicyError::InvalidArchitecture(
                "embedding and hidden sizes must be positive".into(),
            ));
        }
        if !(arch.init_range.is_finite() && arch.init_range >= 0.0) {
            return Err(PolicyError::InvalidArchitecture("init range must be finite and >= 0".into()));
        }
        let option_counts = space.option_counts();
        let mut tensors = ParamSet::zeros(&arch, &option_counts, n_tasks);
        for t in tensors.tensors_mut() {
            for v in t.data_mut() {
                *v = uniform_scalar(arch.init_range, rng);
            }
        }
        Ok(Self {
            arch,
            option_counts,
            tensors,
            version: 0,
        })
    }

    /// Assembles parameters from raw tensors, e.g. from a checkpoint.
    pub fn from_parts(
        arch: Architecture,
        option_counts: Vec<usize>,
        tensors: ParamSet,
        version: u64,
    ) -> Result<Self, PolicyError> {
        let n_tasks = tensors.task_embeddings.rows();
        if n_tasks == 0 {
            return Err(PolicyError::NoTasks);
        }
        if !tensors.same_shape(&ParamSet::zeros(&arch, &option_counts, n_tasks)) {
            return Err(PolicyError::ShapeMismatch);
        }
        Ok(Self {
            arch,
            option_counts,
            tensors,
            version,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn option_counts(&self) -> &[usize] {
        &self.option_counts
    }

    pub fn n_tasks(&self) -> usize {
        self.tensors.task_embeddings.rows()
    }

    /// Monotone counter bumped by every successful update.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn tensors(&self) -> &ParamSet {
        &self.tensors
    }

    /// Direct mutable access for tests and fixtures. Does not bump the version.
    pub fn tensors_mut(&mut self) -> &mut ParamSet {
        &mut self.tensors
    }

    pub fn task_embedding(&self, task: usize) -> Option<&[f64]> {
        (task < self.n_tasks()).then(|| self.tensors.task_embeddings.row(task))
    }

    /// Appends a freshly initialized task embedding row and returns its id.
    /// Every other parameter is left untouched.
    pub fn add_task_embedding<R: Rng + ?Sized>(&mut self, rng: &mut R) -> usize {
        let row: Vec<f64> = (0..self.arch.embedding_size)
            .map(|_| uniform_scalar(self.arch.init_range, rng))
            .collect();
        self.tensors.task_embeddings.push_row(&row);
        self.n_tasks() - 1
    }

    pub(crate) fn check_task(&self, task: usize) -> Result<(), PolicyError> {
        if task >= self.n_tasks() {
            Err(PolicyError::UnknownTask {
                task,
                n_tasks: self.n_tasks(),
            })
        } else {
            Ok(())
        }
    }
}
