use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::kernels::BatchStats;
use crate::tensor::{Scalar, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// What a parameter tensor is, which fixes its initialisation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    ConvWeight { fan_in: usize },
    Bias,
    Gamma,
    Beta,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    pub fn is_trainable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    /// Dot-separated path, e.g. `decoder.1.res1.conv1.weight`.
    pub name: String,
    /// Logical dimensions as stored in weight files (`[c]` for vectors).
    pub dims: Vec<usize>,
    pub kind: ParamKind,
    pub value: Tensor<T>,
}

impl<T> Param<T> {
    pub fn trainable(&self) -> bool {
        self.kind.is_trainable()
    }
}

/// Flat registry of every parameter tensor in a model, in construction order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T = f32> {
    params: Vec<Param<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Registers a tensor with its kind's default value (conv weights start at zero).
    ///
    /// # Panics
    /// If `name` is already registered; layer construction owns name uniqueness.
    pub fn register(&mut self, name: impl Into<String>, shape: Shape, dims: Vec<usize>, kind: ParamKind) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter name `{name}`");
        debug_assert_eq!(dims.iter().product::<usize>(), shape.len());
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(Param {
            name,
            dims,
            kind,
            value: Tensor::full(shape, default_value(kind)),
        });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Element count of trainable tensors (running statistics excluded).
    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable()).map(|p| p.value.len()).sum()
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let p = &mut self.params[id.0];
        if value.shape() != p.value.shape() {
            return Err(Error::dim(
                "set_param",
                format!("{}: {} vs {}", p.name, p.value.shape(), value.shape()),
            ));
        }
        p.value = value;
        Ok(())
    }

    /// Running ← (1 − m)·running + m·batch for one batch-norm layer.
    pub fn update_running(&mut self, mean: ParamId, var: ParamId, stats: &BatchStats<T>, momentum: T) {
        let keep = T::one() - momentum;
        for (r, &b) in self.params[mean.0].value.data_mut().iter_mut().zip(&stats.mean) {
            *r = keep * *r + momentum * b;
        }
        for (r, &b) in self.params[var.0].value.data_mut().iter_mut().zip(&stats.var) {
            *r = keep * *r + momentum * b;
        }
    }

    /// Kaiming-normal conv weights (fan-in, ReLU gain), zero biases, unit
    /// gamma, zero beta, running mean 0 and variance 1. Draws follow registry
    /// order, so the result depends only on the seed.
    pub fn init(&mut self, rng: &mut Rng) {
        for p in &mut self.params {
            match p.kind {
                ParamKind::ConvWeight { fan_in } => {
                    let std = (2.0 / fan_in as f64).sqrt();
                    for v in p.value.data_mut() {
                        *v = T::cast(rng.normal() * std);
                    }
                }
                kind => p.value = Tensor::full(p.value.shape(), default_value(kind)),
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    dims: p.dims.clone(),
                    kind: p.kind,
                    value: p.value.cast(),
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// True when every tensor matches bit for bit.
    pub fn bits_eq(&self, other: &ParamStore<T>) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.name == b.name && a.value.bits_eq(&b.value))
    }
}

fn default_value<T: Scalar>(kind: ParamKind) -> T {
    match kind {
        ParamKind::Gamma | ParamKind::RunningVar => T::one(),
        _ => T::zero(),
    }
}
