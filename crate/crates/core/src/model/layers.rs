//! Parameterised building blocks. Layers hold only parameter ids; values live
//! in the model's [`ParamStore`].

use super::builder::Builder;
use super::config::BlockStyle;
use super::params::{ParamId, ParamKind, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{ConvGeometry, PoolGeometry, PoolMode, Scalar, Shape};

/// Dilation rates of the four parallel branches in a DCP block.
pub const DILATION_RATES: [usize; 4] = [1, 3, 6, 9];

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geom: ConvGeometry,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        geom: ConvGeometry,
        bias: bool,
    ) -> Self {
        let fan_in = in_c * kernel * kernel;
        let weight = store.register(
            format!("{name}.weight"),
            Shape::new(out_c, in_c, kernel, kernel),
            vec![out_c, in_c, kernel, kernel],
            ParamKind::ConvWeight { fan_in },
        );
        let bias = bias.then(|| {
            store.register(
                format!("{name}.bias"),
                Shape::new(1, out_c, 1, 1),
                vec![out_c],
                ParamKind::Bias,
            )
        });
        Conv { weight, bias, geom }
    }

    pub fn forward<T: Scalar, B: Builder<T>>(&self, b: &mut B, store: &ParamStore<T>, x: B::Var) -> Result<B::Var> {
        let w = b.param(store, self.weight);
        let bias = self.bias.map(|id| b.param(store, id));
        b.conv2d(x, w, bias, self.geom)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchNormLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNormLayer {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        let shape = Shape::new(1, channels, 1, 1);
        let mut reg = |suffix: &str, kind| store.register(format!("{name}.{suffix}"), shape, vec![channels], kind);
        BatchNormLayer {
            gamma: reg("gamma", ParamKind::Gamma),
            beta: reg("beta", ParamKind::Beta),
            running_mean: reg("running_mean", ParamKind::RunningMean),
            running_var: reg("running_var", ParamKind::RunningVar),
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.gamma, self.beta, self.running_mean, self.running_var]
    }
}

/// Convolution (no bias) → batch norm → optional ReLU.
#[derive(Clone, Debug)]
pub struct ConvBn {
    pub conv: Conv,
    pub bn: BatchNormLayer,
    pub relu: bool,
}

impl ConvBn {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        geom: ConvGeometry,
        relu: bool,
    ) -> Self {
        ConvBn {
            conv: Conv::new(store, &format!("{name}.conv"), in_c, out_c, kernel, geom, false),
            bn: BatchNormLayer::new(store, &format!("{name}.bn"), out_c),
            relu,
        }
    }

    pub fn forward<T: Scalar, B: Builder<T>>(&self, b: &mut B, store: &ParamStore<T>, x: B::Var) -> Result<B::Var> {
        let y = self.conv.forward(b, store, x)?;
        let y = b.batch_norm(store, &self.bn, y)?;
        Ok(if self.relu { b.relu(y) } else { y })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.conv.param_ids();
        ids.extend(self.bn.param_ids());
        ids
    }
}

/// Residual block: body plus identity (or 1×1 projection) shortcut, then ReLU.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub body: Vec<ConvBn>,
    pub shortcut: Option<ConvBn>,
}

impl ResidualBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_c: usize,
        out_c: usize,
        stride: usize,
        style: BlockStyle,
    ) -> Self {
        let body = match style {
            BlockStyle::Basic => vec![
                ConvBn::new(store, &format!("{name}.conv1"), in_c, out_c, 3, ConvGeometry::new(stride, 1, 1), true),
                ConvBn::new(store, &format!("{name}.conv2"), out_c, out_c, 3, ConvGeometry::new(1, 1, 1), false),
            ],
            BlockStyle::Bottleneck => {
                let mid = out_c / 4;
                vec![
                    ConvBn::new(store, &format!("{name}.conv1"), in_c, mid, 1, ConvGeometry::default(), true),
                    ConvBn::new(store, &format!("{name}.conv2"), mid, mid, 3, ConvGeometry::new(stride, 1, 1), true),
                    ConvBn::new(store, &format!("{name}.conv3"), mid, out_c, 1, ConvGeometry::default(), false),
                ]
            }
        };
        let shortcut = (in_c != out_c || stride != 1).then(|| {
            ConvBn::new(
                store,
                &format!("{name}.shortcut"),
                in_c,
                out_c,
                1,
                ConvGeometry::new(stride, 0, 1),
                false,
            )
        });
        ResidualBlock { body, shortcut }
    }

    pub fn forward<T: Scalar, B: Builder<T>>(&self, b: &mut B, store: &ParamStore<T>, x: B::Var) -> Result<B::Var> {
        let mut h = x;
        for layer in &self.body {
            h = layer.forward(b, store, h)?;
        }
        let skip = match &self.shortcut {
            Some(s) => s.forward(b, store, x)?,
            None => x,
        };
        let sum = b.add(h, skip)?;
        Ok(b.relu(sum))
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.body
            .iter()
            .chain(&self.shortcut)
            .flat_map(ConvBn::param_ids)
            .collect()
    }
}

/// Channel attention (shared 1×1 MLP over avg- and max-pooled descriptors)
/// followed by spatial attention (7×7 conv over channel avg/max maps).
#[derive(Clone, Debug)]
pub struct Cbam {
    pub fc1: Conv,
    pub fc2: Conv,
    pub spatial: Conv,
}

impl Cbam {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize, reduction: usize) -> Result<Self> {
        if channels < reduction {
            return Err(Error::ReductionExceedsChannels {
                ratio: reduction,
                channels,
            });
        }
        let hidden = channels / reduction;
        Ok(Cbam {
            fc1: Conv::new(store, &format!("{name}.mlp.0"), channels, hidden, 1, ConvGeometry::default(), true),
            fc2: Conv::new(store, &format!("{name}.mlp.1"), hidden, channels, 1, ConvGeometry::default(), true),
            spatial: Conv::new(store, &format!("{name}.spatial"), 2, 1, 7, ConvGeometry::new(1, 3, 1), true),
        })
    }

    fn mlp<T: Scalar, B: Builder<T>>(&self, b: &mut B, store: &ParamStore<T>, x: B::Var) -> Result<B::Var> {
        let h = self.fc1.forward(b, store, x)?;
        let h = b.relu(h);
        self.fc2.forward(b, store, h)
    }

    /// Per-channel weights in (0, 1), shape (n, c, 1, 1).
    pub fn channel_weights<T: Scalar, B: Builder<T>>(&self, b: &mut B, store: &ParamStore<T>, x: B::Var) -> Result<B::Var> {
        let avg = b.global_pool(x, PoolMode::Avg)?;
        let max = b.global_pool(x, PoolMode::Max)?;
        let a = self.mlp(b, store, avg)?;
        let m = self.mlp(b, store, max)?;
        let logits = b.add(a, m)?;
        Ok(b.sigmoid(logits))
    }

    /// Per-position weights in (0, 1), shape (n, 1, h, w).
    pub fn spatial_weights<T: Scalar, B: Builder<T>>(&self, b: &mut B, store: &ParamStore<T>, x: B::Var) -> Result<B::Var> {
        let avg = b.channel_reduce(x, PoolMode::Avg)?;
        let max = b.channel_reduce(x, PoolMode::Max)?;
        let maps = b.concat(&[avg, max])?;
        let logits = self.spatial.forward(b, store, maps)?;
        Ok(b.sigmoid(logits))
    }

    pub fn forward<T: Scalar, B: Builder<T>>(&self, b: &mut B, store: &ParamStore<T>, x: B::Var) -> Result<B::Var> {
        let cw = self.channel_weights(b, store, x)?;
        let x = b.mul(x, cw)?;
        let sw = self.spatial_weights(b, store, x)?;
        b.mul(x, sw)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        [&self.fc1, &self.fc2, &self.spatial]
            .into_iter()
            .flat_map(Conv::param_ids)
            .collect()
    }
}

/// Dilated convolution pooling: four parallel dilated 3×3 branches, 1×1
/// fusion, then max-pooling by `pool`.
#[derive(Clone, Debug)]
pub struct DcpBlock {
    pub branches: Vec<ConvBn>,
    pub fuse: ConvBn,
    pub pool: usize,
}

impl DcpBlock {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, in_c: usize, out_c: usize, pool: usize) -> Self {
        let branches = DILATION_RATES
            .iter()
            .map(|&d| {
                ConvBn::new(
                    store,
                    &format!("{name}.branch_d{d}"),
                    in_c,
                    out_c,
                    3,
                    ConvGeometry::same_3x3(d),
                    true,
                )
            })
            .collect();
        let fuse = ConvBn::new(store, &format!("{name}.fuse"), 4 * out_c, out_c, 1, ConvGeometry::default(), true);
        DcpBlock { branches, fuse, pool }
    }

    pub fn forward<T: Scalar, B: Builder<T>>(&self, b: &mut B, store: &ParamStore<T>, x: B::Var) -> Result<B::Var> {
        let outs = self
            .branches
            .iter()
            .map(|br| br.forward(b, store, x))
            .collect::<Result<Vec<_>>>()?;
        let cat = b.concat(&outs)?;
        let fused = self.fuse.forward(b, store, cat)?;
        pool_if_needed(b, fused, self.pool)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.branches
            .iter()
            .chain(std::iter::once(&self.fuse))
            .flat_map(ConvBn::param_ids)
            .collect()
    }
}

fn pool_if_needed<T: Scalar, B: Builder<T>>(b: &mut B, x: B::Var, pool: usize) -> Result<B::Var> {
    if pool > 1 {
        b.max_pool2d(x, PoolGeometry::square(pool))
    } else {
        Ok(x)
    }
}

/// Per-level block between an encoder feature and the bottleneck.
#[derive(Clone, Debug)]
pub enum LevelBlock {
    Dcp(DcpBlock),
    /// Ablation arm without dilated branches: 3×3 conv-BN-ReLU, same pooling.
    Plain { conv: ConvBn, pool: usize },
}

impl LevelBlock {
    pub fn forward<T: Scalar, B: Builder<T>>(&self, b: &mut B, store: &ParamStore<T>, x: B::Var) -> Result<B::Var> {
        match self {
            LevelBlock::Dcp(d) => d.forward(b, store, x),
            LevelBlock::Plain { conv, pool } => {
                let y = conv.forward(b, store, x)?;
                pool_if_needed(b, y, *pool)
            }
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        match self {
            LevelBlock::Dcp(d) => d.param_ids(),
            LevelBlock::Plain { conv, .. } => conv.param_ids(),
        }
    }
}

/// Bilinear ×2 → concat skip → two residual blocks → optional CBAM.
#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub res: [ResidualBlock; 2],
    pub cbam: Option<Cbam>,
}

impl DecoderBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_c: usize,
        skip_c: usize,
        out_c: usize,
        cbam_reduction: Option<usize>,
    ) -> Result<Self> {
        let res = [
            ResidualBlock::new(store, &format!("{name}.res1"), in_c + skip_c, out_c, 1, BlockStyle::Basic),
            ResidualBlock::new(store, &format!("{name}.res2"), out_c, out_c, 1, BlockStyle::Basic),
        ];
        let cbam = cbam_reduction
            .map(|r| Cbam::new(store, &format!("{name}.cbam"), out_c, r))
            .transpose()?;
        Ok(DecoderBlock { res, cbam })
    }

    pub fn forward<T: Scalar, B: Builder<T>>(
        &self,
        b: &mut B,
        store: &ParamStore<T>,
        x: B::Var,
        skip: B::Var,
    ) -> Result<B::Var> {
        let (xs, ss) = (b.shape(x), b.shape(skip));
        if ss.h != 2 * xs.h || ss.w != 2 * xs.w || ss.n != xs.n {
            return Err(Error::dim(
                "decoder",
                format!("skip {ss} must be twice the spatial size of input {xs}"),
            ));
        }
        let up = b.upsample(x, 2)?;
        let cat = b.concat(&[up, skip])?;
        let h = self.res[0].forward(b, store, cat)?;
        let h = self.res[1].forward(b, store, h)?;
        match &self.cbam {
            Some(c) => c.forward(b, store, h),
            None => Ok(h),
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.res.iter().flat_map(ResidualBlock::param_ids).collect();
        if let Some(c) = &self.cbam {
            ids.extend(c.param_ids());
        }
        ids
    }
}
