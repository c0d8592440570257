//! Parameter and MAC accounting, and single-image throughput.
//!
//! MAC convention: a convolution costs `ho·wo·co·ci·kh·kw` per sample; batch
//! norm, activations, pooling, resizing and elementwise ops cost one MAC per
//! output element; concatenation is free.

use std::collections::BTreeMap;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::model::{BatchNormLayer, Builder, DilatedSegNet, Mode, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::kernels::Broadcast;
use crate::tensor::{ConvGeometry, Execution, Graph, PoolGeometry, PoolMode, Scalar, Shape, Tensor};

/// A [`Builder`] that propagates shapes only and tallies MACs per op.
#[derive(Clone, Debug, Default)]
pub struct MacCounter {
    pub total: u64,
    pub by_op: BTreeMap<&'static str, u64>,
}

impl MacCounter {
    pub fn new() -> Self {
        Self::default()
    }

    fn charge(&mut self, op: &'static str, macs: usize) {
        self.total += macs as u64;
        *self.by_op.entry(op).or_default() += macs as u64;
    }

    fn elementwise(&mut self, op: &'static str, s: Shape) -> Shape {
        self.charge(op, s.len());
        s
    }
}

impl<T: Scalar> Builder<T> for MacCounter {
    type Var = Shape;

    fn shape(&self, v: Shape) -> Shape {
        v
    }

    fn mode(&self) -> Mode {
        Mode::Eval
    }

    fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Shape {
        store.value(id).shape()
    }

    fn conv2d(&mut self, x: Shape, w: Shape, _b: Option<Shape>, geom: ConvGeometry) -> Result<Shape> {
        if x.c != w.c {
            return Err(Error::dim("conv2d", format!("input {x} vs weight {w}")));
        }
        let ho = geom.out_extent(x.h, w.h);
        let wo = geom.out_extent(x.w, w.w);
        let (Some(ho), Some(wo)) = (ho, wo) else {
            return Err(Error::dim("conv2d", format!("empty output for input {x}, kernel {w}")));
        };
        let out = Shape::new(x.n, w.n, ho, wo);
        self.charge("conv2d", out.len() * w.c * w.h * w.w);
        Ok(out)
    }

    fn batch_norm(&mut self, _store: &ParamStore<T>, _bn: &BatchNormLayer, x: Shape) -> Result<Shape> {
        Ok(self.elementwise("batch_norm", x))
    }

    fn relu(&mut self, x: Shape) -> Shape {
        self.elementwise("relu", x)
    }

    fn sigmoid(&mut self, x: Shape) -> Shape {
        self.elementwise("sigmoid", x)
    }

    fn max_pool2d(&mut self, x: Shape, geom: PoolGeometry) -> Result<Shape> {
        let (Some(ho), Some(wo)) = (geom.out_extent(x.h), geom.out_extent(x.w)) else {
            return Err(Error::dim("max_pool2d", format!("window {} exceeds input {x}", geom.kernel)));
        };
        Ok(self.elementwise("max_pool2d", Shape::new(x.n, x.c, ho, wo)))
    }

    fn global_pool(&mut self, x: Shape, _mode: PoolMode) -> Result<Shape> {
        Ok(self.elementwise("global_pool", Shape::new(x.n, x.c, 1, 1)))
    }

    fn channel_reduce(&mut self, x: Shape, _mode: PoolMode) -> Result<Shape> {
        Ok(self.elementwise("channel_reduce", Shape::new(x.n, 1, x.h, x.w)))
    }

    fn upsample(&mut self, x: Shape, scale: usize) -> Result<Shape> {
        Ok(self.elementwise("bilinear_resize", Shape::new(x.n, x.c, x.h * scale, x.w * scale)))
    }

    fn concat(&mut self, xs: &[Shape]) -> Result<Shape> {
        let first = xs[0];
        if xs.iter().any(|s| (s.n, s.h, s.w) != (first.n, first.h, first.w)) {
            return Err(Error::dim("concat", format!("{xs:?}")));
        }
        Ok(Shape::new(first.n, xs.iter().map(|s| s.c).sum(), first.h, first.w))
    }

    fn add(&mut self, a: Shape, b: Shape) -> Result<Shape> {
        Broadcast::resolve(a, b)?;
        Ok(self.elementwise("add", a))
    }

    fn mul(&mut self, a: Shape, b: Shape) -> Result<Shape> {
        Broadcast::resolve(a, b)?;
        Ok(self.elementwise("mul", a))
    }
}

/// Trainable parameter elements (running statistics excluded).
pub fn count_params<T: Scalar>(model: &DilatedSegNet<T>) -> usize {
    model.param_count()
}

/// MACs of one forward pass on `input`, from a shape-only walk of the layers.
pub fn count_macs<T: Scalar>(model: &DilatedSegNet<T>, input: Shape) -> Result<MacCounter> {
    let mut counter = MacCounter::new();
    model.forward(&mut counter, input)?;
    Ok(counter)
}

/// MACs of every node recorded on `graph`, under the same convention.
pub fn count_macs_on_graph<T: Scalar>(graph: &Graph<T>) -> Result<u64> {
    let mut total = 0u64;
    for id in graph.ids() {
        let out = graph.shape(id).len() as u64;
        total += match graph.op_name(id) {
            "leaf" | "concat" => 0,
            "conv2d" => {
                let w = graph.shape(graph.inputs(id)[1]);
                out * (w.c * w.h * w.w) as u64
            }
            "max_pool2d" | "global_avg_pool" | "global_max_pool" | "channel_avg" | "channel_max"
            | "bilinear_resize" | "relu" | "sigmoid" | "batch_norm" | "add" | "mul" => out,
            other => return Err(Error::UnsupportedLayer(other)),
        };
    }
    Ok(total)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FpsReport {
    /// Median over repetitions.
    pub fps: f64,
    /// Frames per second of each repetition.
    pub runs: Vec<f64>,
}

/// `n` frames in `seconds` → frames per second.
pub fn fps_from(n: usize, seconds: f64) -> f64 {
    n as f64 / seconds
}

/// Times `n` batch-1 eval forwards after `warmup` untimed ones, `reps` times,
/// and reports the median rate. Needs an otherwise idle machine to be meaningful.
pub fn measure_fps(model: &DilatedSegNet, input: Shape, n: usize, warmup: usize, reps: usize) -> Result<FpsReport> {
    let input = Shape::new(1, input.c, input.h, input.w);
    let mut rng = Rng::new(0);
    let x = Tensor::from_fn(input, |_, _, _, _| rng.uniform() as f32);
    for _ in 0..warmup {
        model.predict_full(&x, Execution::default())?;
    }
    let mut runs = Vec::with_capacity(reps);
    for _ in 0..reps.max(1) {
        let start = Instant::now();
        for _ in 0..n {
            model.predict_full(&x, Execution::default())?;
        }
        runs.push(fps_from(n, start.elapsed().as_secs_f64()));
    }
    let mut sorted = runs.clone();
    sorted.sort_by(f64::total_cmp);
    Ok(FpsReport {
        fps: sorted[sorted.len() / 2],
        runs,
    })
}
