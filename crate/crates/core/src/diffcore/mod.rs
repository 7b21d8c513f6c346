//! Minimal reverse-mode differentiation: exactly the tensor operations the
//! localization models need, an Adam optimizer, a finite-difference
//! gradient checker and a binary checkpoint format.
//!
//! All arithmetic is f64. Computation is recorded on a [`Graph`] tape whose
//! leaves reference parameters in a [`ParamStore`]; `backward` replays the
//! tape once in reverse and returns per-parameter gradients.

mod adam;
mod checkpoint;
mod gradcheck;
mod graph;

pub use adam::{adam_step, clip_global_norm, AdamParams};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
pub use gradcheck::{grad_check, GradCheckReport, WorstCoord, DEFAULT_H};
pub use graph::{Gradients, Graph, NodeId};

use std::collections::HashMap;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("unknown parameter {0:?}")]
    UnknownParam(String),
    #[error("parameter {0:?} already registered")]
    DuplicateParam(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("NaN gradient for parameter {0:?}; optimizer step aborted")]
    NanGradient(String),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("checkpoint format error: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Dense row-major tensor of f64 values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor, DiffError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(DiffError::Shape {
                op: "tensor",
                detail: format!("shape {:?} needs {} values, got {}", shape, numel, data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel] }
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> f64) -> Tensor {
        let numel: usize = shape.iter().product();
        Tensor { shape, data: (0..numel).map(&mut f).collect() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn check_finite(&self, context: &str) -> Result<(), DiffError> {
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(DiffError::NonFinite(context.to_string()));
        }
        Ok(())
    }
}

/// One named parameter with its gradient accumulator and Adam moments.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Vec<f64>,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Named, shaped parameters plus optimizer state. Parameters keep their
/// registration order, which makes every downstream serialization
/// deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    pub fn register(&mut self, name: &str, value: Tensor) -> Result<(), DiffError> {
        if self.index.contains_key(name) {
            return Err(DiffError::DuplicateParam(name.to_string()));
        }
        value.check_finite(name)?;
        let n = value.numel();
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            value,
            grad: vec![0.0; n],
            m: vec![0.0; n],
            v: vec![0.0; n],
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn param_index(&self, name: &str) -> Result<usize, DiffError> {
        self.index.get(name).copied().ok_or_else(|| DiffError::UnknownParam(name.to_string()))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, DiffError> {
        Ok(&self.params[self.param_index(name)?].value)
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor, DiffError> {
        let i = self.param_index(name)?;
        Ok(&mut self.params[i].value)
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn param_at(&self, index: usize) -> &Param {
        &self.params[index]
    }

    pub fn grad(&self, name: &str) -> Result<&[f64], DiffError> {
        Ok(&self.params[self.param_index(name)?].grad)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub(crate) fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub(crate) fn bump_step(&mut self) -> u64 {
        self.step += 1;
        self.step
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Adds `grads` into the per-parameter gradient accumulators.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (i, g) in grads.by_param().iter().enumerate() {
            if let Some(g) = g {
                for (acc, &d) in self.params[i].grad.iter_mut().zip(g.iter()) {
                    *acc += d;
                }
            }
        }
    }

    /// Full copy of values, moments and step count.
    pub fn snapshot(&self) -> StoreSnapshot {
        StoreSnapshot { params: self.params.clone(), step: self.step }
    }

    pub fn restore(&mut self, snap: &StoreSnapshot) {
        self.params = snap.params.clone();
        self.step = snap.step;
        self.index = self
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| (p.name.clone(), i))
            .collect();
    }
}

/// Saved state of a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct StoreSnapshot {
    params: Vec<Param>,
    step: u64,
}
