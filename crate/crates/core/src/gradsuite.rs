//! Finite-difference gradient suites over every graph operation, every
//! layer, both losses and the assembled network, all in 64-bit mode.

use crate::error::{Error, Result};
use crate::model::{
    BlockStyle, Cbam, Conv, ConvBn, DcpBlock, DecoderBlock, DilatedSegNet, GraphBuilder, Mode, ModelConfig, ParamId,
    ParamStore, ResidualBlock,
};
use crate::rng::Rng;
use crate::tensor::{
    grad_check, random_tensor, ConvGeometry, GradCheckConfig, GradCheckReport, Graph, NodeId, PoolGeometry, PoolMode,
    Shape, Tensor,
};
use crate::training::{bce_loss, combined_loss, dice_loss};

/// Relative tolerance for operations, layers and losses.
pub const OP_TOL: f64 = 1e-4;
/// Relative tolerance for the full network.
pub const NET_TOL: f64 = 1e-3;
/// Seeded instances per suite.
pub const INSTANCES: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteResult {
    pub name: String,
    pub instances: usize,
    pub passed: usize,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl SuiteResult {
    pub fn pass(&self) -> bool {
        self.passed == self.instances
    }

    /// `PASS name  n/n  max_rel_err=…`.
    pub fn line(&self) -> String {
        format!(
            "{} {:<28} {:>3}/{:<3} max_rel_err={:.2e} tol={:.0e}",
            if self.pass() { "PASS" } else { "FAIL" },
            self.name,
            self.passed,
            self.instances,
            self.max_rel_err,
            self.tol
        )
    }
}

fn suite<F>(name: &str, instances: usize, tol: f64, check: F) -> Result<SuiteResult>
where
    F: Fn(u64, &GradCheckConfig) -> Result<GradCheckReport>,
{
    let mut passed = 0;
    let mut max_rel_err = 0.0f64;
    for i in 0..instances {
        let cfg = GradCheckConfig {
            seed: i as u64,
            ..GradCheckConfig::with_tol(tol)
        };
        let r = check(i as u64, &cfg)?;
        passed += usize::from(r.pass);
        max_rel_err = max_rel_err.max(if r.non_finite { f64::INFINITY } else { r.max_rel_err });
    }
    Ok(SuiteResult {
        name: name.to_owned(),
        instances,
        passed,
        max_rel_err,
        tol,
    })
}

fn rng_for(name: &str, seed: u64) -> Rng {
    let salt = name.bytes().fold(0u64, |h, b| h.wrapping_mul(31).wrapping_add(b as u64));
    Rng::with_stream(seed, salt)
}

/// `Σ y·r` for a fixed random `r`, so every output element carries a distinct weight.
fn project(g: &mut Graph<f64>, y: NodeId, seed: u64) -> Result<NodeId> {
    let r = random_tensor(g.shape(y), &mut Rng::with_stream(seed, 7));
    let r = g.constant(r);
    let p = g.mul(y, r)?;
    Ok(g.sum(p))
}

/// Random probabilities bounded away from 0 and 1, and a binary target.
fn prob_and_target(shape: Shape, rng: &mut Rng) -> (Tensor<f64>, Tensor<f64>) {
    let p = Tensor::from_fn(shape, |_, _, _, _| rng.uniform_in(0.05, 0.95));
    let t = Tensor::from_fn(shape, |_, _, _, _| f64::from(u8::from(rng.coin(0.5))));
    (p, t)
}

type UnaryOp = fn(&mut Graph<f64>, NodeId) -> Result<NodeId>;

fn unary_suite(name: &str, instances: usize, shape: Shape, op: UnaryOp) -> Result<SuiteResult> {
    suite(name, instances, OP_TOL, |seed, cfg| {
        let x = random_tensor(shape, &mut rng_for(name, seed));
        grad_check(
            |g, x| {
                let y = op(g, x)?;
                project(g, y, seed)
            },
            &x,
            cfg,
        )
    })
}

/// One suite per differentiable graph operation.
pub fn op_suites(instances: usize) -> Result<Vec<SuiteResult>> {
    let s = Shape::new(2, 3, 6, 6);
    let mut out = Vec::new();
    for (name, k, geom) in [
        ("conv2d 3x3 s1 p1", 3, ConvGeometry::new(1, 1, 1)),
        ("conv2d 3x3 s2 p1", 3, ConvGeometry::new(2, 1, 1)),
        ("conv2d 3x3 dilation 3", 3, ConvGeometry::same_3x3(3)),
        ("conv2d 7x7 s2 p3", 7, ConvGeometry::new(2, 3, 1)),
        ("conv2d 1x1", 1, ConvGeometry::default()),
    ] {
        out.push(suite(name, instances, OP_TOL, |seed, cfg| {
            let mut rng = rng_for(name, seed);
            let x = random_tensor(Shape::new(2, 3, 7, 7), &mut rng);
            let w = random_tensor(Shape::new(4, 3, k, k), &mut rng);
            let b = random_tensor(Shape::new(1, 4, 1, 1), &mut rng);
            let input = grad_check(
                |g, x| {
                    let (w, b) = (g.constant(w.clone()), g.constant(b.clone()));
                    let y = g.conv2d(x, w, Some(b), geom)?;
                    project(g, y, seed)
                },
                &x,
                cfg,
            )?;
            let weight = grad_check(
                |g, w| {
                    let (x, b) = (g.constant(x.clone()), g.constant(b.clone()));
                    let y = g.conv2d(x, w, Some(b), geom)?;
                    project(g, y, seed)
                },
                &w,
                cfg,
            )?;
            let bias = grad_check(
                |g, b| {
                    let (x, w) = (g.constant(x.clone()), g.constant(w.clone()));
                    let y = g.conv2d(x, w, Some(b), geom)?;
                    project(g, y, seed)
                },
                &b,
                cfg,
            )?;
            Ok(merge(&[input, weight, bias]))
        })?);
    }
    out.push(unary_suite("max_pool2d 3x3 s2 p1", instances, s, |g, x| {
        g.max_pool2d(x, PoolGeometry::new(3, 2, 1))
    })?);
    out.push(unary_suite("max_pool2d 2x2", instances, s, |g, x| g.max_pool2d(x, PoolGeometry::square(2)))?);
    out.push(unary_suite("global_pool avg", instances, s, |g, x| g.global_pool(x, PoolMode::Avg))?);
    out.push(unary_suite("global_pool max", instances, s, |g, x| g.global_pool(x, PoolMode::Max))?);
    out.push(unary_suite("channel_reduce avg", instances, s, |g, x| g.channel_reduce(x, PoolMode::Avg))?);
    out.push(unary_suite("channel_reduce max", instances, s, |g, x| g.channel_reduce(x, PoolMode::Max))?);
    out.push(unary_suite("upsample x2", instances, s, |g, x| g.upsample(x, 2))?);
    out.push(unary_suite("resize_bilinear 6x6->4x9", instances, s, |g, x| g.resize_bilinear(x, 4, 9))?);
    out.push(unary_suite("relu", instances, s, |g, x| Ok(g.relu(x)))?);
    out.push(unary_suite("sigmoid", instances, s, |g, x| Ok(g.sigmoid(x)))?);
    out.push(unary_suite("scale", instances, s, |g, x| Ok(g.scale(x, -1.7)))?);
    out.push(unary_suite("concat", instances, s, |g, x| {
        let other = g.constant(Tensor::full(Shape::new(2, 2, 6, 6), 0.3));
        g.concat(&[other, x, x])
    })?);
    for (name, other) in [
        ("add same shape", Shape::new(2, 3, 6, 6)),
        ("add per-channel", Shape::new(2, 3, 1, 1)),
        ("mul same shape", Shape::new(2, 3, 6, 6)),
        ("mul per-channel", Shape::new(2, 3, 1, 1)),
        ("mul per-position", Shape::new(2, 1, 6, 6)),
    ] {
        let is_add = name.starts_with("add");
        out.push(suite(name, instances, OP_TOL, |seed, cfg| {
            let mut rng = rng_for(name, seed);
            let a = random_tensor(s, &mut rng);
            let b = random_tensor(other, &mut rng);
            let f = |g: &mut Graph<f64>, a: NodeId, b: NodeId| if is_add { g.add(a, b) } else { g.mul(a, b) };
            let left = grad_check(
                |g, a| {
                    let bn = g.constant(b.clone());
                    let y = f(g, a, bn)?;
                    project(g, y, seed)
                },
                &a,
                cfg,
            )?;
            let right = grad_check(
                |g, b| {
                    let an = g.constant(a.clone());
                    let y = f(g, an, b)?;
                    project(g, y, seed)
                },
                &b,
                cfg,
            )?;
            Ok(merge(&[left, right]))
        })?);
    }
    for train in [true, false] {
        let name = if train { "batch_norm train" } else { "batch_norm eval" };
        out.push(suite(name, instances, OP_TOL, |seed, cfg| {
            let mut rng = rng_for(name, seed);
            let x = random_tensor(s, &mut rng);
            let gamma = Tensor::from_fn(Shape::new(1, 3, 1, 1), |_, _, _, _| rng.uniform_in(0.5, 1.5));
            let beta = random_tensor(Shape::new(1, 3, 1, 1), &mut rng);
            let mean = random_tensor(Shape::new(1, 3, 1, 1), &mut rng);
            let var = Tensor::from_fn(Shape::new(1, 3, 1, 1), |_, _, _, _| rng.uniform_in(0.5, 2.0));
            let bn = |g: &mut Graph<f64>, x: NodeId, gm: NodeId, bt: NodeId| -> Result<NodeId> {
                Ok(g.batch_norm(x, gm, bt, Some((&mean, &var)), train, 1e-5)?.0)
            };
            let dx = grad_check(
                |g, x| {
                    let (gm, bt) = (g.constant(gamma.clone()), g.constant(beta.clone()));
                    let y = bn(g, x, gm, bt)?;
                    project(g, y, seed)
                },
                &x,
                cfg,
            )?;
            let dgamma = grad_check(
                |g, gm| {
                    let (xn, bt) = (g.constant(x.clone()), g.constant(beta.clone()));
                    let y = bn(g, xn, gm, bt)?;
                    project(g, y, seed)
                },
                &gamma,
                cfg,
            )?;
            let dbeta = grad_check(
                |g, bt| {
                    let (xn, gm) = (g.constant(x.clone()), g.constant(gamma.clone()));
                    let y = bn(g, xn, gm, bt)?;
                    project(g, y, seed)
                },
                &beta,
                cfg,
            )?;
            Ok(merge(&[dx, dgamma, dbeta]))
        })?);
    }
    Ok(out)
}

/// Dice, BCE and their weighted sum, differentiated with respect to the probabilities.
pub fn loss_suites(instances: usize) -> Result<Vec<SuiteResult>> {
    type LossFn = fn(&mut Graph<f64>, NodeId, NodeId) -> Result<NodeId>;
    let losses: [(&str, LossFn); 3] = [
        ("dice_loss", dice_loss),
        ("bce_loss", bce_loss),
        ("combined_loss", |g, p, t| combined_loss(g, p, t, 1.0, 1.0)),
    ];
    losses
        .into_iter()
        .map(|(name, f)| {
            suite(name, instances, OP_TOL, |seed, cfg| {
                let (p, t) = prob_and_target(Shape::new(2, 1, 5, 5), &mut rng_for(name, seed));
                grad_check(
                    |g, p| {
                        let t = g.constant(t.clone());
                        f(g, p, t)
                    },
                    &p,
                    cfg,
                )
            })
        })
        .collect()
}

/// Checks one layer: the input gradient, plus the gradient of one trainable
/// parameter chosen by `seed` so that a suite covers every parameter.
fn layer_check<F>(
    store: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    seed: u64,
    cfg: &GradCheckConfig,
    forward: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut GraphBuilder<'_, f64>, &[NodeId]) -> Result<NodeId>,
{
    let run = |g: &mut Graph<f64>, xs: &[NodeId], bind: Option<(ParamId, NodeId)>| -> Result<NodeId> {
        let y = {
            let mut b = GraphBuilder::new(g, Mode::Train, false);
            if let Some((id, node)) = bind {
                b.bind(id, node);
            }
            forward(&mut b, xs)?
        };
        project(g, y, seed)
    };
    let input = grad_check(
        |g, x| {
            let mut xs = vec![x];
            xs.extend(inputs[1..].iter().map(|t| g.constant(t.clone())));
            run(g, &xs, None)
        },
        &inputs[0],
        cfg,
    )?;
    let trainable: Vec<ParamId> = store.iter().filter(|(_, p)| p.trainable()).map(|(id, _)| id).collect();
    let pid = trainable[seed as usize % trainable.len()];
    let param = grad_check(
        |g, w| {
            let xs: Vec<NodeId> = inputs.iter().map(|t| g.constant(t.clone())).collect();
            run(g, &xs, Some((pid, w)))
        },
        store.value(pid),
        cfg,
    )?;
    Ok(merge(&[input, param]))
}

/// Random parameters: conv weights from the usual initialiser, BN affine
/// terms perturbed away from identity.
fn randomized(mut store: ParamStore<f64>, rng: &mut Rng) -> ParamStore<f64> {
    store.init(rng);
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let name = store.get(id).name.clone();
        let perturb = name.ends_with(".bias") || name.ends_with(".gamma") || name.ends_with(".beta");
        if perturb {
            for v in store.value_mut(id).data_mut() {
                *v += rng.uniform_in(-0.3, 0.3);
            }
        }
    }
    store
}

/// One suite per layer type, in train mode.
pub fn layer_suites(instances: usize) -> Result<Vec<SuiteResult>> {
    let mut out = Vec::new();

    out.push(suite("layer conv", instances, OP_TOL, |seed, cfg| {
        let mut rng = rng_for("layer conv", seed);
        let mut store = ParamStore::new();
        let conv = Conv::new(&mut store, "c", 3, 4, 3, ConvGeometry::same_3x3(2), true);
        let store = randomized(store, &mut rng);
        let x = random_tensor(Shape::new(2, 3, 6, 6), &mut rng);
        layer_check(&store, &[x], seed, cfg, |b, xs| conv.forward(b, &store, xs[0]))
    })?);

    out.push(suite("layer conv_bn_relu", instances, OP_TOL, |seed, cfg| {
        let mut rng = rng_for("layer conv_bn_relu", seed);
        let mut store = ParamStore::new();
        let layer = ConvBn::new(&mut store, "cb", 3, 4, 3, ConvGeometry::new(1, 1, 1), true);
        let store = randomized(store, &mut rng);
        let x = random_tensor(Shape::new(2, 3, 6, 6), &mut rng);
        layer_check(&store, &[x], seed, cfg, |b, xs| layer.forward(b, &store, xs[0]))
    })?);

    for (name, in_c, out_c, stride, style) in [
        ("layer residual identity", 4, 4, 1, BlockStyle::Basic),
        ("layer residual projection", 3, 4, 2, BlockStyle::Basic),
        ("layer residual bottleneck", 4, 8, 2, BlockStyle::Bottleneck),
    ] {
        out.push(suite(name, instances, OP_TOL, |seed, cfg| {
            let mut rng = rng_for(name, seed);
            let mut store = ParamStore::new();
            let block = ResidualBlock::new(&mut store, "r", in_c, out_c, stride, style);
            let store = randomized(store, &mut rng);
            let x = random_tensor(Shape::new(2, in_c, 6, 6), &mut rng);
            layer_check(&store, &[x], seed, cfg, |b, xs| block.forward(b, &store, xs[0]))
        })?);
    }

    out.push(suite("layer cbam", instances, OP_TOL, |seed, cfg| {
        let mut rng = rng_for("layer cbam", seed);
        let mut store = ParamStore::new();
        let cbam = Cbam::new(&mut store, "a", 4, 2)?;
        let store = randomized(store, &mut rng);
        let x = random_tensor(Shape::new(2, 4, 6, 6), &mut rng);
        layer_check(&store, &[x], seed, cfg, |b, xs| cbam.forward(b, &store, xs[0]))
    })?);

    out.push(suite("layer dcp", instances, OP_TOL, |seed, cfg| {
        let mut rng = rng_for("layer dcp", seed);
        let mut store = ParamStore::new();
        let dcp = DcpBlock::new(&mut store, "d", 2, 3, 2);
        let store = randomized(store, &mut rng);
        let x = random_tensor(Shape::new(2, 2, 8, 8), &mut rng);
        layer_check(&store, &[x], seed, cfg, |b, xs| dcp.forward(b, &store, xs[0]))
    })?);

    out.push(suite("layer decoder", instances, OP_TOL, |seed, cfg| {
        let mut rng = rng_for("layer decoder", seed);
        let mut store = ParamStore::new();
        let dec = DecoderBlock::new(&mut store, "dec", 3, 2, 4, Some(2))?;
        let store = randomized(store, &mut rng);
        let x = random_tensor(Shape::new(2, 3, 3, 3), &mut rng);
        let skip = random_tensor(Shape::new(2, 2, 6, 6), &mut rng);
        layer_check(&store, &[x, skip], seed, cfg, |b, xs| dec.forward(b, &store, xs[0], xs[1]))
    })?);

    Ok(out)
}

/// The desk network in train mode under the combined loss, at `size`×`size`:
/// a sampled subset of input coordinates and of every tensor's coordinates
/// for a spread of parameters.
pub fn network_suite(size: usize, coords: usize) -> Result<SuiteResult> {
    let name = "network desk";
    let model = DilatedSegNet::<f32>::new_initialized(ModelConfig::desk().with_input_size(size, size), 42)?;
    let mut model: DilatedSegNet<f64> = model.cast();
    let mut rng = rng_for(name, 0);
    model.params = randomized(model.params, &mut rng);
    let x = Tensor::from_fn(Shape::new(2, 3, size, size), |_, _, _, _| rng.uniform());
    let (_, target) = prob_and_target(Shape::new(2, 1, size, size), &mut rng);
    let cfg = GradCheckConfig {
        max_coords: coords,
        ..GradCheckConfig::with_tol(NET_TOL)
    };
    let run = |g: &mut Graph<f64>, x: NodeId, bind: Option<(ParamId, NodeId)>| -> Result<NodeId> {
        let mask = {
            let mut b = GraphBuilder::new(g, Mode::Train, false);
            if let Some((id, node)) = bind {
                b.bind(id, node);
            }
            model.forward(&mut b, x)?.mask
        };
        let t = g.constant(target.clone());
        combined_loss(g, mask, t, 1.0, 1.0)
    };
    let mut reports = vec![grad_check(|g, xn| run(g, xn, None), &x, &cfg)?];
    for pname in [
        "encoder.stem.conv.weight",
        "encoder.stage3.0.conv1.conv.weight",
        "level1.dcp.branch_d9.conv.weight",
        "level4.dcp.fuse.bn.gamma",
        "bottleneck.conv.weight",
        "decoder1.cbam.mlp.0.weight",
        "decoder3.cbam.spatial.weight",
        "decoder4.res2.conv2.bn.beta",
        "head.bias",
    ] {
        let pid = model
            .params
            .find(pname)
            .ok_or_else(|| Error::dim("network_suite", format!("no parameter `{pname}`")))?;
        let cfg = GradCheckConfig {
            max_coords: coords.div_ceil(4),
            ..cfg.clone()
        };
        reports.push(grad_check(
            |g, w| {
                let xn = g.constant(x.clone());
                run(g, xn, Some((pid, w)))
            },
            model.params.value(pid),
            &cfg,
        )?);
    }
    let passed = usize::from(reports.iter().all(|r| r.pass));
    Ok(SuiteResult {
        name: name.to_owned(),
        instances: 1,
        passed,
        max_rel_err: merge(&reports).max_rel_err,
        tol: NET_TOL,
    })
}

fn merge(reports: &[GradCheckReport]) -> GradCheckReport {
    let worst = reports
        .iter()
        .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
        .expect("at least one report");
    GradCheckReport {
        max_rel_err: worst.max_rel_err,
        worst_index: worst.worst_index,
        checked: reports.iter().map(|r| r.checked).sum(),
        non_finite: reports.iter().any(|r| r.non_finite),
        pass: reports.iter().all(|r| r.pass),
    }
}

/// Operation, loss and layer suites; with `full`, also the network check.
pub fn run_all(full: bool) -> Result<Vec<SuiteResult>> {
    let mut out = op_suites(INSTANCES)?;
    out.extend(loss_suites(INSTANCES)?);
    out.extend(layer_suites(INSTANCES)?);
    if full {
        out.push(network_suite(64, 64)?);
    }
    Ok(out)
}
