//! The assembled encoder → DCP → bottleneck → decoder network.

use super::builder::{Builder, GraphBuilder, Mode, BN_MOMENTUM};
use super::config::ModelConfig;
use super::layers::{BatchNormLayer, Conv, ConvBn, DcpBlock, DecoderBlock, LevelBlock, ResidualBlock};
use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::kernels::BatchStats;
use crate::tensor::{ConvGeometry, Execution, Graph, PoolGeometry, Scalar, Tensor};

/// Values produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct NetOutput<V> {
    /// Foreground probabilities, (n, 1, h, w).
    pub mask: V,
    /// Post-ReLU output of the bottleneck fusion conv, (n, 4·dcp, h/32, w/32).
    pub bottleneck: V,
    /// Encoder features f1..f4 at h/2, h/4, h/8, h/16.
    pub features: [V; 4],
    /// Per-level blocks after pooling, all at h/32.
    pub levels: [V; 4],
}

/// Materialised tensors of an eval-mode forward.
#[derive(Clone, Debug)]
pub struct Prediction<T> {
    pub mask: Tensor<T>,
    pub bottleneck: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct DilatedSegNet<T = f32> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub stem: ConvBn,
    pub stages: [Vec<ResidualBlock>; 3],
    pub levels: [LevelBlock; 4],
    pub fusion: ConvBn,
    pub decoders: [DecoderBlock; 4],
    pub head: Conv,
}

impl<T: Scalar> DilatedSegNet<T> {
    /// Builds the layer graph with default-valued parameters (zero conv weights).
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let s = &mut store;
        let [w1, w2, w3, w4] = config.encoder_widths;
        let style = config.encoder_style;

        let stem = ConvBn::new(s, "encoder.stem", config.in_channels, w1, 7, ConvGeometry::new(2, 3, 1), true);
        let stage = |s: &mut ParamStore<T>, idx: usize, in_c: usize, out_c: usize, stride: usize| {
            (0..config.encoder_blocks[idx])
                .map(|b| {
                    let (ci, st) = if b == 0 { (in_c, stride) } else { (out_c, 1) };
                    ResidualBlock::new(s, &format!("encoder.stage{}.{b}", idx + 2), ci, out_c, st, style)
                })
                .collect::<Vec<_>>()
        };
        let stages = [stage(s, 0, w1, w2, 1), stage(s, 1, w2, w3, 2), stage(s, 2, w3, w4, 2)];

        let dcp = config.dcp_channels;
        let levels = [w1, w2, w3, w4]
            .into_iter()
            .enumerate()
            .map(|(i, c)| {
                let pool = 1 << (4 - i);
                let name = format!("level{}", i + 1);
                if config.use_dcp {
                    LevelBlock::Dcp(DcpBlock::new(s, &format!("{name}.dcp"), c, dcp, pool))
                } else {
                    LevelBlock::Plain {
                        conv: ConvBn::new(s, &format!("{name}.plain"), c, dcp, 3, ConvGeometry::new(1, 1, 1), true),
                        pool,
                    }
                }
            })
            .collect::<Vec<_>>()
            .try_into()
            .expect("four levels");

        let bottleneck = config.bottleneck_channels();
        let fusion = ConvBn::new(s, "bottleneck", bottleneck, bottleneck, 3, ConvGeometry::new(1, 1, 1), true);

        let reduction = config.use_cbam.then_some(config.cbam_reduction);
        let skips = [w4, w3, w2, w1];
        let mut in_c = bottleneck;
        let mut decoders = Vec::with_capacity(4);
        for (i, (&skip_c, &out_c)) in skips.iter().zip(&config.decoder_widths).enumerate() {
            decoders.push(DecoderBlock::new(s, &format!("decoder{}", i + 1), in_c, skip_c, out_c, reduction)?);
            in_c = out_c;
        }
        let decoders = decoders.try_into().expect("four decoders");
        let head = Conv::new(s, "head", in_c, 1, 1, ConvGeometry::default(), true);

        Ok(DilatedSegNet {
            config,
            params: store,
            stem,
            stages,
            levels,
            fusion,
            decoders,
            head,
        })
    }

    /// Builds and initialises parameters from `seed`.
    pub fn new_initialized(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut net = Self::new(config)?;
        net.init(&mut Rng::new(seed));
        Ok(net)
    }

    pub fn init(&mut self, rng: &mut Rng) {
        self.params.init(rng);
    }

    /// Trainable element count (running statistics excluded).
    pub fn param_count(&self) -> usize {
        self.params.trainable_count()
    }

    /// Trainable elements in the CBAM modules.
    pub fn cbam_param_count(&self) -> usize {
        let ids = self
            .decoders
            .iter()
            .filter_map(|d| d.cbam.as_ref())
            .flat_map(|c| c.param_ids());
        self.trainable_in(ids)
    }

    /// Trainable elements in the four per-level blocks.
    pub fn level_param_count(&self) -> usize {
        self.trainable_in(self.levels.iter().flat_map(LevelBlock::param_ids))
    }

    fn trainable_in(&self, ids: impl Iterator<Item = ParamId>) -> usize {
        ids.map(|id| self.params.get(id))
            .filter(|p| p.trainable())
            .map(|p| p.value.len())
            .sum()
    }

    /// Records the forward pass of input `x` on builder `b`.
    pub fn forward<B: Builder<T>>(&self, b: &mut B, x: B::Var) -> Result<NetOutput<B::Var>> {
        let shape = b.shape(x);
        if shape.c != self.config.in_channels {
            return Err(Error::dim(
                "net_forward",
                format!("expected {} input channels, got {shape}", self.config.in_channels),
            ));
        }
        if shape.h % 32 != 0 || shape.w % 32 != 0 || shape.h < 64 || shape.w < 64 {
            return Err(Error::dim(
                "net_forward",
                format!("input extents of {shape} must be multiples of 32 and at least 64"),
            ));
        }
        let p = &self.params;

        let f1 = self.stem.forward(b, p, x)?;
        let mut h = b.max_pool2d(f1, PoolGeometry::new(3, 2, 1))?;
        let mut feats = vec![f1];
        for stage in &self.stages {
            for block in stage {
                h = block.forward(b, p, h)?;
            }
            feats.push(h);
        }
        let features: [B::Var; 4] = feats.try_into().ok().expect("four features");

        let mut levels = Vec::with_capacity(4);
        for (level, &f) in self.levels.iter().zip(&features) {
            levels.push(level.forward(b, p, f)?);
        }
        let levels: [B::Var; 4] = levels.try_into().ok().expect("four levels");

        let cat = b.concat(&levels)?;
        let bottleneck = self.fusion.forward(b, p, cat)?;

        let mut d = bottleneck;
        for (dec, &skip) in self.decoders.iter().zip(features.iter().rev()) {
            d = dec.forward(b, p, d, skip)?;
        }
        let up = b.upsample(d, 2)?;
        let logits = self.head.forward(b, p, up)?;
        let mask = b.sigmoid(logits);
        Ok(NetOutput {
            mask,
            bottleneck,
            features,
            levels,
        })
    }

    /// Eval-mode forward returning the mask and bottleneck activation.
    pub fn predict_full(&self, x: &Tensor<T>, exec: Execution) -> Result<Prediction<T>> {
        let mut graph = Graph::with_execution(exec);
        let xn = graph.constant(x.clone());
        let out = {
            let mut b = GraphBuilder::new(&mut graph, Mode::Eval, false);
            self.forward(&mut b, xn)?
        };
        Ok(Prediction {
            mask: graph.value(out.mask).clone(),
            bottleneck: graph.value(out.bottleneck).clone(),
        })
    }

    /// Eval-mode foreground probabilities for `x`.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.predict_full(x, Execution::default())?.mask)
    }

    /// Folds train-mode batch statistics into the running estimates.
    pub fn apply_batch_stats(&mut self, stats: &[(BatchNormLayer, BatchStats<T>)]) {
        let m = T::cast(BN_MOMENTUM);
        for (bn, s) in stats {
            self.params.update_running(bn.running_mean, bn.running_var, s, m);
        }
    }

    /// Same architecture and parameter values in another scalar type.
    pub fn cast<U: Scalar>(&self) -> DilatedSegNet<U> {
        DilatedSegNet {
            config: self.config.clone(),
            params: self.params.cast(),
            stem: self.stem.clone(),
            stages: self.stages.clone(),
            levels: self.levels.clone(),
            fusion: self.fusion.clone(),
            decoders: self.decoders.clone(),
            head: self.head.clone(),
        }
    }
}
