//! Named parameter storage and its binding onto a tape.

use std::collections::BTreeMap;

use crate::autodiff::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Parameters by name, kept in sorted order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor<f32>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<f32>) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<f32>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Param(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<f32>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Param(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<f32>)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<f32>)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }
}

/// Lazily places parameters from a [`ParamStore`] onto a graph, once each.
pub struct Binder<'a, S: Scalar> {
    store: &'a ParamStore,
    vars: BTreeMap<String, Var>,
    trainable: bool,
    overrides: Option<&'a BTreeMap<String, Tensor<S>>>,
}

impl<'a, S: Scalar> Binder<'a, S> {
    /// Parameters become differentiable leaves.
    pub fn trainable(store: &'a ParamStore) -> Self {
        Self {
            store,
            vars: BTreeMap::new(),
            trainable: true,
            overrides: None,
        }
    }

    /// Parameters become constants; no backward rules are recorded.
    pub fn frozen(store: &'a ParamStore) -> Self {
        Self {
            store,
            vars: BTreeMap::new(),
            trainable: false,
            overrides: None,
        }
    }

    /// Values in `overrides` replace the stored ones at the binder's own
    /// precision (used by finite-difference probes).
    pub fn with_overrides(mut self, overrides: &'a BTreeMap<String, Tensor<S>>) -> Self {
        self.overrides = Some(overrides);
        self
    }

    pub fn var(&mut self, g: &mut Graph<S>, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let value = match self.overrides.and_then(|o| o.get(name)) {
            Some(t) => t.clone(),
            None => self.store.get(name)?.cast::<S>(),
        };
        let v = if self.trainable {
            g.param(value)
        } else {
            g.constant(value)
        };
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    /// Uses `v` for `name` instead of reading the store.
    pub fn bind(&mut self, name: impl Into<String>, v: Var) {
        self.vars.insert(name.into(), v);
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn bound(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Gradients for every bound parameter, by name.
    pub fn gradients(&self, g: &Graph<S>, grads: &Gradients<S>) -> BTreeMap<String, Tensor<S>> {
        self.vars
            .iter()
            .map(|(name, &v)| (name.clone(), grads.get(g, v)))
            .collect()
    }
}

/// How a parameter is initialized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Const(f32),
    TruncNormal(f64),
    /// Uniform on `[-bound, bound]`.
    Uniform(f64),
}

/// Name, shape and initializer of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn materialize<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> Tensor<f32> {
        match self.init {
            Init::Zeros => Tensor::zeros(&self.shape),
            Init::Const(v) => Tensor::full(&self.shape, v),
            Init::TruncNormal(std) => Tensor::trunc_normal(&self.shape, std, rng),
            Init::Uniform(b) => Tensor::uniform(&self.shape, -b, b, rng),
        }
    }
}

impl ParamStore {
    /// Materializes `specs` in order, drawing from `rng`.
    pub fn from_specs<R: rand::Rng + ?Sized>(specs: &[ParamSpec], rng: &mut R) -> Self {
        let mut store = Self::new();
        for s in specs {
            store.insert(s.name.clone(), s.materialize(rng));
        }
        store
    }
}
