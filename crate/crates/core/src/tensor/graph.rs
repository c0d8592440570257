//! Tape-based reverse-mode automatic differentiation.
//!
//! Nodes are appended in evaluation order, so the tape is already a
//! topological order and backward is a single reverse sweep. Gradients
//! accumulate additively into each node's grad slot; call
//! [`Graph::zero_grad`] between backward passes that should not accumulate.

use super::kernels::{self, BatchNormSaved, BatchStats, Broadcast, ConvGeometry, PoolGeometry, PoolMode, ResizeTable};
use super::parallel::Execution;
use super::{Scalar, Shape, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d { geom: ConvGeometry, has_bias: bool },
    MaxPool { argmax: Vec<usize> },
    GlobalAvg,
    GlobalMax { argmax: Vec<usize> },
    ChannelAvg,
    ChannelMax { argmax: Vec<usize> },
    Resize { table: ResizeTable<T> },
    Relu,
    Sigmoid,
    BatchNorm { saved: BatchNormSaved<T> },
    Concat { widths: Vec<usize> },
    Add { bc: Broadcast },
    Mul { bc: Broadcast },
    Sum,
    Scale(T),
    Dice { eps: T },
    Bce { clamp: T },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool { .. } => "max_pool2d",
            Op::GlobalAvg => "global_avg_pool",
            Op::GlobalMax { .. } => "global_max_pool",
            Op::ChannelAvg => "channel_avg",
            Op::ChannelMax { .. } => "channel_max",
            Op::Resize { .. } => "bilinear_resize",
            Op::Relu => "relu",
            Op::Sigmoid => "sigmoid",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Concat { .. } => "concat",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Sum => "sum",
            Op::Scale(_) => "scale",
            Op::Dice { .. } => "dice_loss",
            Op::Bce { .. } => "bce_loss",
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    inputs: Vec<NodeId>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Debug)]
pub struct Graph<T = f32> {
    nodes: Vec<Node<T>>,
    exec: Execution,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self::with_execution(Execution::default())
    }

    pub fn with_execution(exec: Execution) -> Self {
        Graph {
            nodes: Vec::new(),
            exec,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.leaf(value, false)
    }

    /// Leaf whose gradient is tracked.
    pub fn variable(&mut self, value: Tensor<T>) -> NodeId {
        self.leaf(value, true)
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            inputs: Vec::new(),
            op: Op::Leaf,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, inputs: Vec<NodeId>, op: Op<T>) -> NodeId {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            inputs,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> Shape {
        self.nodes[id.0].value.shape()
    }

    /// Accumulated gradient, or `None` if backward has not reached this node.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Name of the operation that produced `id`.
    pub fn op_name(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.name()
    }

    pub fn inputs(&self, id: NodeId) -> &[NodeId] {
        &self.nodes[id.0].inputs
    }

    pub fn ids(&self) -> impl Iterator<Item = NodeId> {
        (0..self.nodes.len()).map(NodeId)
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, geom: ConvGeometry) -> Result<NodeId> {
        let bias = b.map(|b| self.value(b).data());
        let y = kernels::conv2d_forward(self.value(x), self.value(w), bias, geom, self.exec)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(
            y,
            inputs,
            Op::Conv2d {
                geom,
                has_bias: b.is_some(),
            },
        ))
    }

    pub fn max_pool2d(&mut self, x: NodeId, geom: PoolGeometry) -> Result<NodeId> {
        let (y, argmax) = kernels::max_pool_forward(self.value(x), geom, self.exec)?;
        Ok(self.push(y, vec![x], Op::MaxPool { argmax }))
    }

    pub fn global_pool(&mut self, x: NodeId, mode: PoolMode) -> Result<NodeId> {
        let (y, argmax) = kernels::global_pool_forward(self.value(x), mode)?;
        let op = match mode {
            PoolMode::Avg => Op::GlobalAvg,
            PoolMode::Max => Op::GlobalMax { argmax },
        };
        Ok(self.push(y, vec![x], op))
    }

    pub fn channel_reduce(&mut self, x: NodeId, mode: PoolMode) -> Result<NodeId> {
        let (y, argmax) = kernels::channel_reduce_forward(self.value(x), mode)?;
        let op = match mode {
            PoolMode::Avg => Op::ChannelAvg,
            PoolMode::Max => Op::ChannelMax { argmax },
        };
        Ok(self.push(y, vec![x], op))
    }

    /// Bilinear upsampling by an integer factor ≥ 2.
    pub fn upsample(&mut self, x: NodeId, scale: usize) -> Result<NodeId> {
        if scale < 2 {
            return Err(Error::dim("upsample", format!("scale {scale} < 2")));
        }
        let s = self.shape(x);
        self.resize_bilinear(x, s.h * scale, s.w * scale)
    }

    pub fn resize_bilinear(&mut self, x: NodeId, ho: usize, wo: usize) -> Result<NodeId> {
        let (y, table) = kernels::resize_bilinear_forward(self.value(x), ho, wo, self.exec)?;
        Ok(self.push(y, vec![x], Op::Resize { table }))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let y = kernels::relu(self.value(x));
        self.push(y, vec![x], Op::Relu)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let y = kernels::sigmoid(self.value(x));
        self.push(y, vec![x], Op::Sigmoid)
    }

    /// Batch normalisation. In train mode the batch statistics are returned so
    /// the caller can update its running estimates; eval mode requires
    /// `running = Some((mean, var))`.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running: Option<(&Tensor<T>, &Tensor<T>)>,
        train: bool,
        eps: T,
    ) -> Result<(NodeId, Option<BatchStats<T>>)> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma).data(), self.value(beta).data());
        let (y, saved, stats) = if train {
            let (y, saved, stats) = kernels::batch_norm_train(xv, gv, bv, eps, self.exec)?;
            (y, saved, Some(stats))
        } else {
            let running = running.map(|(m, v)| (m.data(), v.data()));
            let (y, saved) = kernels::batch_norm_eval(xv, gv, bv, running, eps, self.exec)?;
            (y, saved, None)
        };
        Ok((self.push(y, vec![x, gamma, beta], Op::BatchNorm { saved }), stats))
    }

    pub fn concat(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let values: Vec<&Tensor<T>> = xs.iter().map(|&i| self.value(i)).collect();
        let y = kernels::concat_channels(&values)?;
        let widths = values.iter().map(|v| v.shape().c).collect();
        Ok(self.push(y, xs.to_vec(), Op::Concat { widths }))
    }

    /// `a + b`, with `b` equal-shaped or broadcast per channel / per position.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let bc = Broadcast::resolve(self.shape(a), self.shape(b))?;
        let y = kernels::elementwise(self.value(a), self.value(b), bc, |x, y| x + y);
        Ok(self.push(y, vec![a, b], Op::Add { bc }))
    }

    /// `a · b`, with the same broadcasting rules as [`Graph::add`].
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let bc = Broadcast::resolve(self.shape(a), self.shape(b))?;
        let y = kernels::elementwise(self.value(a), self.value(b), bc, |x, y| x * y);
        Ok(self.push(y, vec![a, b], Op::Mul { bc }))
    }

    /// Sum of all elements as a (1, 1, 1, 1) scalar.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let y = Tensor::scalar(self.value(x).sum());
        self.push(y, vec![x], Op::Sum)
    }

    pub fn scale(&mut self, x: NodeId, c: T) -> NodeId {
        let y = self.value(x).map(|v| v * c);
        self.push(y, vec![x], Op::Scale(c))
    }

    /// `1 − (2·Σpg + ε) / (Σp + Σg + ε)` over the whole batch. The target is
    /// treated as a constant.
    pub fn dice_loss(&mut self, p: NodeId, target: NodeId, eps: T) -> Result<NodeId> {
        let (pv, gv) = (self.value(p), self.value(target));
        same_shape("dice_loss", pv.shape(), gv.shape())?;
        let (inter, sp, sg) = dice_sums(pv.data(), gv.data());
        let two = T::cast(2.0);
        let loss = T::one() - (two * inter + eps) / (sp + sg + eps);
        Ok(self.push(Tensor::scalar(loss), vec![p, target], Op::Dice { eps }))
    }

    /// Mean binary cross-entropy on probabilities clamped to `[c, 1 − c]`.
    /// The target is treated as a constant.
    pub fn bce_loss(&mut self, p: NodeId, target: NodeId, clamp: T) -> Result<NodeId> {
        let (pv, gv) = (self.value(p), self.value(target));
        same_shape("bce_loss", pv.shape(), gv.shape())?;
        let lo = clamp;
        let hi = T::one() - clamp;
        let total = pv
            .data()
            .iter()
            .zip(gv.data())
            .fold(T::zero(), |acc, (&p, &g)| {
                let pc = p.max(lo).min(hi);
                acc - (g * pc.ln() + (T::one() - g) * (T::one() - pc).ln())
            });
        let loss = total / T::cast(pv.len() as f64);
        Ok(self.push(Tensor::scalar(loss), vec![p, target], Op::Bce { clamp }))
    }

    /// Propagates `∂loss/∂value` to every reachable node that requires grad.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let shape = self.shape(loss);
        if shape != Shape::SCALAR {
            return Err(Error::NonScalarLoss(shape));
        }
        let mut pending: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        pending[loss.0] = Some(Tensor::ones(Shape::SCALAR));
        for id in (0..=loss.0).rev() {
            let Some(g) = pending[id].take() else {
                continue;
            };
            if !self.nodes[id].requires_grad {
                continue;
            }
            for (input, contribution) in self.local_backward(id, &g) {
                accumulate(&mut pending[input.0], contribution);
            }
            accumulate(&mut self.nodes[id].grad, g);
        }
        Ok(())
    }

    fn local_backward(&self, id: usize, g: &Tensor<T>) -> Vec<(NodeId, Tensor<T>)> {
        let node = &self.nodes[id];
        let inputs = &node.inputs;
        let wants = |k: usize| self.nodes[inputs[k].0].requires_grad;
        let xv = |k: usize| &self.nodes[inputs[k].0].value;
        let exec = self.exec;
        let mut out = Vec::with_capacity(inputs.len());
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { geom, has_bias } => {
                if wants(0) {
                    let dx = kernels::conv2d_backward_input(g, xv(1), xv(0).shape(), *geom, exec);
                    out.push((inputs[0], dx));
                }
                if wants(1) {
                    let dw = kernels::conv2d_backward_weight(g, xv(0), xv(1).shape(), *geom, exec);
                    out.push((inputs[1], dw));
                }
                if *has_bias && wants(2) {
                    out.push((inputs[2], kernels::conv2d_backward_bias(g)));
                }
            }
            Op::MaxPool { argmax } | Op::GlobalMax { argmax } | Op::ChannelMax { argmax } => {
                if wants(0) {
                    out.push((inputs[0], kernels::scatter_backward(g, argmax, xv(0).shape())));
                }
            }
            Op::GlobalAvg => {
                if wants(0) {
                    out.push((inputs[0], kernels::global_avg_backward(g, xv(0).shape())));
                }
            }
            Op::ChannelAvg => {
                if wants(0) {
                    out.push((inputs[0], kernels::channel_avg_backward(g, xv(0).shape())));
                }
            }
            Op::Resize { table } => {
                if wants(0) {
                    out.push((
                        inputs[0],
                        kernels::resize_bilinear_backward(g, table, xv(0).shape(), exec),
                    ));
                }
            }
            Op::Relu => {
                if wants(0) {
                    out.push((inputs[0], kernels::relu_backward(g, xv(0))));
                }
            }
            Op::Sigmoid => {
                if wants(0) {
                    out.push((inputs[0], kernels::sigmoid_backward(g, &node.value)));
                }
            }
            Op::BatchNorm { saved } => {
                let (dx, dgamma, dbeta) = kernels::batch_norm_backward(g, xv(1).data(), saved, exec);
                if wants(0) {
                    out.push((inputs[0], dx));
                }
                if wants(1) {
                    out.push((inputs[1], dgamma));
                }
                if wants(2) {
                    out.push((inputs[2], dbeta));
                }
            }
            Op::Concat { widths } => {
                let parts = g.split_channels(widths).expect("concat widths match gradient");
                for (k, part) in parts.into_iter().enumerate() {
                    if wants(k) {
                        out.push((inputs[k], part));
                    }
                }
            }
            Op::Add { bc } => {
                if wants(0) {
                    out.push((inputs[0], g.clone()));
                }
                if wants(1) {
                    out.push((inputs[1], bc.reduce(g.shape(), xv(1).shape(), g.data())));
                }
            }
            Op::Mul { bc } => {
                let (a, b) = (xv(0), xv(1));
                if wants(0) {
                    out.push((inputs[0], kernels::elementwise(g, b, *bc, |gv, bv| gv * bv)));
                }
                if wants(1) {
                    let full: Vec<T> = g.data().iter().zip(a.data()).map(|(&gv, &av)| gv * av).collect();
                    out.push((inputs[1], bc.reduce(a.shape(), b.shape(), &full)));
                }
            }
            Op::Sum => {
                if wants(0) {
                    out.push((inputs[0], Tensor::full(xv(0).shape(), g.data()[0])));
                }
            }
            Op::Scale(c) => {
                if wants(0) {
                    out.push((inputs[0], g.map(|v| v * *c)));
                }
            }
            Op::Dice { eps } => {
                if wants(0) {
                    let (p, t) = (xv(0), xv(1));
                    let (inter, sp, sg) = dice_sums(p.data(), t.data());
                    let two = T::cast(2.0);
                    let den = sp + sg + *eps;
                    let num = two * inter + *eps;
                    let up = g.data()[0];
                    let dp = t.map(|tv| -up * (two * tv * den - num) / (den * den));
                    out.push((inputs[0], dp));
                }
            }
            Op::Bce { clamp } => {
                if wants(0) {
                    let (p, t) = (xv(0), xv(1));
                    let lo = *clamp;
                    let hi = T::one() - *clamp;
                    let scale = g.data()[0] / T::cast(p.len() as f64);
                    let data = p
                        .data()
                        .iter()
                        .zip(t.data())
                        .map(|(&pv, &tv)| {
                            if pv < lo || pv > hi {
                                T::zero()
                            } else {
                                scale * (pv - tv) / (pv * (T::one() - pv))
                            }
                        })
                        .collect();
                    out.push((inputs[0], Tensor::from_vec(p.shape(), data)));
                }
            }
        }
        out
    }
}

fn same_shape(op: &'static str, a: Shape, b: Shape) -> Result<()> {
    if a != b {
        return Err(Error::dim(op, format!("prediction {a} vs target {b}")));
    }
    Ok(())
}

fn dice_sums<T: Scalar>(p: &[T], g: &[T]) -> (T, T, T) {
    p.iter().zip(g).fold(
        (T::zero(), T::zero(), T::zero()),
        |(i, sp, sg), (&pv, &gv)| (i + pv * gv, sp + pv, sg + gv),
    )
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        None => *slot = Some(g),
        Some(acc) => {
            for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
    }
}
