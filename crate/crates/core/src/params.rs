//! Named parameter storage and per-forward tape binding.

use std::ops::Index;

use rand::Rng;

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{HagError, Result};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Replaces every tensor from `(name, tensor)` pairs that must match this
    /// set's names and shapes in order.
    pub fn load(&mut self, entries: Vec<(String, Tensor)>) -> Result<()> {
        if entries.len() != self.tensors.len() {
            return Err(HagError::Checkpoint(format!(
                "expected {} tensors, found {}",
                self.tensors.len(),
                entries.len()
            )));
        }
        for ((name, t), (own_name, own)) in entries.iter().zip(self.names.iter().zip(&self.tensors)) {
            if name != own_name || t.shape() != own.shape() {
                return Err(HagError::Checkpoint(format!(
                    "tensor {name} {:?} does not match {own_name} {:?}",
                    t.shape(),
                    own.shape()
                )));
            }
        }
        self.tensors = entries.into_iter().map(|(_, t)| t).collect();
        Ok(())
    }

    /// Registers every tensor on `tape` as a differentiable leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundParams<'t> {
        BoundParams {
            vars: self.tensors.iter().map(|t| tape.param(t.clone())).collect(),
        }
    }
}

pub struct BoundParams<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> Index<ParamId> for BoundParams<'t> {
    type Output = Var<'t>;

    fn index(&self, id: ParamId) -> &Var<'t> {
        &self.vars[id.0]
    }
}

impl<'t> BoundParams<'t> {
    /// Wraps existing tape variables, in [`ParamSet`] order.
    pub fn from_vars(vars: Vec<Var<'t>>) -> Self {
        Self { vars }
    }

    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }

    /// Gradients for every bound parameter, zeros where unreached.
    pub fn gradients(&self, grads: &Gradients) -> Result<Vec<Tensor>> {
        self.vars.iter().map(|v| grads.wrt(*v)).collect()
    }
}

/// Adam state for every tensor of a [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub config: AdamConfig,
    states: Vec<AdamState>,
}

impl Optimizer {
    pub fn new(params: &ParamSet, config: AdamConfig) -> Self {
        Self {
            config,
            states: params.tensors.iter().map(AdamState::for_param).collect(),
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor]) -> Result<()> {
        if grads.len() != params.tensors.len() {
            return Err(HagError::InvalidArgument(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.tensors.len()
            )));
        }
        for ((p, g), s) in params.tensors.iter_mut().zip(grads).zip(&mut self.states) {
            adam_step(p, g, s, &self.config)?;
        }
        Ok(())
    }
}

/// Linear-layer initialization for a `fan_in × fan_out` matrix: entries
/// uniform in `±1/√fan_in`.
pub fn fan_in_uniform<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (fan_in as f64).sqrt().recip();
    let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-limit..limit)).collect();
    Tensor::from_parts_unchecked(vec![fan_in, fan_out], data)
}
