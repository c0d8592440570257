//! The operation surface layers are written against.
//!
//! [`GraphBuilder`] records onto an autodiff [`Graph`]; the MAC counter in
//! `metrics` implements the same trait over shapes only, so both walk the
//! identical layer code.

use std::collections::BTreeMap;

use super::layers::BatchNormLayer;
use super::params::{ParamId, ParamStore};
use crate::error::Result;
use crate::tensor::kernels::BatchStats;
use crate::tensor::{ConvGeometry, Graph, NodeId, PoolGeometry, PoolMode, Scalar, Shape, Tensor};

/// Batch-norm epsilon.
pub const BN_EPS: f64 = 1e-5;
/// Weight of the current batch in running-statistic updates.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub trait Builder<T: Scalar> {
    type Var: Copy;

    fn shape(&self, v: Self::Var) -> Shape;
    fn mode(&self) -> Mode;
    fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Self::Var;
    fn conv2d(&mut self, x: Self::Var, w: Self::Var, b: Option<Self::Var>, geom: ConvGeometry) -> Result<Self::Var>;
    fn batch_norm(&mut self, store: &ParamStore<T>, bn: &BatchNormLayer, x: Self::Var) -> Result<Self::Var>;
    fn relu(&mut self, x: Self::Var) -> Self::Var;
    fn sigmoid(&mut self, x: Self::Var) -> Self::Var;
    fn max_pool2d(&mut self, x: Self::Var, geom: PoolGeometry) -> Result<Self::Var>;
    fn global_pool(&mut self, x: Self::Var, mode: PoolMode) -> Result<Self::Var>;
    fn channel_reduce(&mut self, x: Self::Var, mode: PoolMode) -> Result<Self::Var>;
    fn upsample(&mut self, x: Self::Var, scale: usize) -> Result<Self::Var>;
    fn concat(&mut self, xs: &[Self::Var]) -> Result<Self::Var>;
    fn add(&mut self, a: Self::Var, b: Self::Var) -> Result<Self::Var>;
    fn mul(&mut self, a: Self::Var, b: Self::Var) -> Result<Self::Var>;
}

/// Records a forward pass on a [`Graph`], binding each parameter to one leaf.
pub struct GraphBuilder<'g, T: Scalar> {
    pub graph: &'g mut Graph<T>,
    mode: Mode,
    track_params: bool,
    bound: BTreeMap<ParamId, NodeId>,
    stats: Vec<(BatchNormLayer, BatchStats<T>)>,
}

impl<'g, T: Scalar> GraphBuilder<'g, T> {
    /// `track_params` makes parameters gradient-tracking variables; otherwise
    /// they enter the graph as constants.
    pub fn new(graph: &'g mut Graph<T>, mode: Mode, track_params: bool) -> Self {
        GraphBuilder {
            graph,
            mode,
            track_params,
            bound: BTreeMap::new(),
            stats: Vec::new(),
        }
    }

    /// Binds parameter `id` to an existing node instead of a fresh leaf.
    pub fn bind(&mut self, id: ParamId, node: NodeId) {
        self.bound.insert(id, node);
    }

    pub fn node(&self, id: ParamId) -> Option<NodeId> {
        self.bound.get(&id).copied()
    }

    /// Gradients of every bound trainable parameter after backward, in registry order.
    pub fn param_grads(&self, store: &ParamStore<T>) -> Vec<(ParamId, Tensor<T>)> {
        self.bound
            .iter()
            .filter(|(pid, _)| store.get(**pid).trainable())
            .map(|(&pid, &nid)| {
                let g = self
                    .graph
                    .grad(nid)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(store.value(pid).shape()));
                (pid, g)
            })
            .collect()
    }

    /// Batch statistics gathered by train-mode batch norms, in forward order.
    pub fn take_batch_stats(&mut self) -> Vec<(BatchNormLayer, BatchStats<T>)> {
        std::mem::take(&mut self.stats)
    }
}

impl<T: Scalar> Builder<T> for GraphBuilder<'_, T> {
    type Var = NodeId;

    fn shape(&self, v: NodeId) -> Shape {
        self.graph.shape(v)
    }

    fn mode(&self) -> Mode {
        self.mode
    }

    fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> NodeId {
        if let Some(&n) = self.bound.get(&id) {
            return n;
        }
        let p = store.get(id);
        let value = p.value.clone();
        let n = if self.track_params && p.trainable() {
            self.graph.variable(value)
        } else {
            self.graph.constant(value)
        };
        self.bound.insert(id, n);
        n
    }

    fn conv2d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, geom: ConvGeometry) -> Result<NodeId> {
        self.graph.conv2d(x, w, b, geom)
    }

    fn batch_norm(&mut self, store: &ParamStore<T>, bn: &BatchNormLayer, x: NodeId) -> Result<NodeId> {
        let gamma = self.param(store, bn.gamma);
        let beta = self.param(store, bn.beta);
        let running = (store.value(bn.running_mean), store.value(bn.running_var));
        let train = self.mode == Mode::Train;
        let (y, stats) = self
            .graph
            .batch_norm(x, gamma, beta, Some(running), train, T::cast(BN_EPS))?;
        if let Some(s) = stats {
            self.stats.push((*bn, s));
        }
        Ok(y)
    }

    fn relu(&mut self, x: NodeId) -> NodeId {
        self.graph.relu(x)
    }

    fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.graph.sigmoid(x)
    }

    fn max_pool2d(&mut self, x: NodeId, geom: PoolGeometry) -> Result<NodeId> {
        self.graph.max_pool2d(x, geom)
    }

    fn global_pool(&mut self, x: NodeId, mode: PoolMode) -> Result<NodeId> {
        self.graph.global_pool(x, mode)
    }

    fn channel_reduce(&mut self, x: NodeId, mode: PoolMode) -> Result<NodeId> {
        self.graph.channel_reduce(x, mode)
    }

    fn upsample(&mut self, x: NodeId, scale: usize) -> Result<NodeId> {
        self.graph.upsample(x, scale)
    }

    fn concat(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        self.graph.concat(xs)
    }

    fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.graph.add(a, b)
    }

    fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.graph.mul(a, b)
    }
}
