//! Losses, optimisation, augmentation and the epoch loop.

pub mod augment;
pub mod losses;
pub mod optim;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::config::KeyValues;
use crate::data::SamplePair;
use crate::error::{Error, Result};
use crate::metrics::{confusion, metrics_from_counts, METRIC_EPS, THRESHOLD};
use crate::model::{save_weights, DilatedSegNet, GraphBuilder, Mode, ParamStore, Preset};
use crate::rng::Rng;
use crate::tensor::{par_map, Execution, Graph, Tensor};

pub use augment::{augment, AugmentConfig};
pub use losses::{bce_loss, combined_loss, combined_loss_value, dice_loss, BCE_CLAMP, DICE_EPS};
pub use optim::{Adam, EarlyStopConfig, EarlyStopping, PlateauConfig, PlateauScheduler, StopDecision};

/// Stream offset separating augmentation draws from shuffling draws.
const AUGMENT_STREAM: u64 = 1 << 40;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub plateau: PlateauConfig,
    pub early_stop: EarlyStopConfig,
    pub seed: u64,
    pub augment: AugmentConfig,
    pub w_dice: f64,
    pub w_bce: f64,
    pub exec: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            batch_size: 16,
            max_epochs: 100,
            plateau: PlateauConfig::default(),
            early_stop: EarlyStopConfig::default(),
            seed: 42,
            augment: AugmentConfig::default(),
            w_dice: 1.0,
            w_bce: 1.0,
            exec: Execution::default(),
        }
    }
}

impl TrainConfig {
    /// Recipe matched to a model preset. The desk preset trains a much
    /// smaller network on 64×64 inputs for 30 epochs, at a higher rate.
    pub fn for_preset(preset: Preset) -> Self {
        match preset {
            Preset::Desk => TrainConfig {
                lr: 1e-3,
                max_epochs: 30,
                augment: AugmentConfig::none(),
                ..Self::default()
            },
            Preset::Paper => Self::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("training: {m}")));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return bad("batch_size and max_epochs must be at least 1");
        }
        if self.plateau.patience == 0 || self.early_stop.patience == 0 {
            return bad("patience must be at least 1");
        }
        if !(self.plateau.factor > 0.0 && self.plateau.factor < 1.0) {
            return bad("plateau factor must lie in (0, 1)");
        }
        if self.w_dice < 0.0 || self.w_bce < 0.0 {
            return bad("loss weights must be non-negative");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_dsc: f64,
    /// Learning rate used during the epoch.
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    /// Index into `epochs` of the lowest validation loss.
    pub best: Option<usize>,
}

impl History {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn best_record(&self) -> Option<&EpochRecord> {
        self.best.map(|i| &self.epochs[i])
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,val_dsc,lr\n");
        for e in &self.epochs {
            let _ = writeln!(out, "{},{},{},{},{}", e.epoch, e.train_loss, e.val_loss, e.val_dsc, e.lr);
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Owns the optimiser state for one model.
pub struct Trainer<'m> {
    pub model: &'m mut DilatedSegNet,
    pub adam: Adam,
    pub w_dice: f64,
    pub w_bce: f64,
    pub exec: Execution,
}

impl<'m> Trainer<'m> {
    pub fn new(model: &'m mut DilatedSegNet, cfg: &TrainConfig) -> Self {
        Trainer {
            model,
            adam: Adam::new(),
            w_dice: cfg.w_dice,
            w_bce: cfg.w_bce,
            exec: cfg.exec,
        }
    }

    /// Train-mode forward, combined loss, backward, Adam update and running
    /// statistic update on one batch. Returns the loss before the update.
    pub fn step(&mut self, images: &Tensor, masks: &Tensor, lr: f64, epoch: usize) -> Result<f64> {
        let mut graph = Graph::with_execution(self.exec);
        let x = graph.constant(images.clone());
        let y = graph.constant(masks.clone());
        let store = &self.model.params;
        let mut b = GraphBuilder::new(&mut graph, Mode::Train, true);
        let out = self.model.forward(&mut b, x)?;
        let loss = combined_loss(b.graph, out.mask, y, self.w_dice, self.w_bce)?;
        let value = b.graph.value(loss).data()[0] as f64;
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                step: self.adam.t as usize + 1,
            });
        }
        b.graph.backward(loss)?;
        let grads = b.param_grads(store);
        let stats = b.take_batch_stats();
        self.adam.step(&mut self.model.params, &grads, lr)?;
        self.model.apply_batch_stats(&stats);
        Ok(value)
    }
}

/// Eval-mode loss and image-averaged DSC over `pairs`, in batches of `batch_size`.
pub fn validate(model: &DilatedSegNet, pairs: &[SamplePair], cfg: &TrainConfig) -> Result<(f64, f64)> {
    let batches: Vec<&[SamplePair]> = pairs.chunks(cfg.batch_size).collect();
    let results = par_map(&batches, |chunk| -> Result<(f64, f64)> {
        let (x, y) = stack_pairs(chunk.iter().map(|p| (&p.image, &p.mask)))?;
        let pred = model.predict_full(&x, Execution::Sequential)?.mask;
        let loss = combined_loss_value(&pred, &y, cfg.w_dice, cfg.w_bce)? * chunk.len() as f64;
        let mut dsc = 0.0;
        for i in 0..chunk.len() {
            let c = confusion(&pred.sample(i), &y.sample(i), THRESHOLD)?;
            dsc += metrics_from_counts(&c, METRIC_EPS).dsc;
        }
        Ok((loss, dsc))
    });
    let (mut loss, mut dsc) = (0.0, 0.0);
    for r in results {
        let (l, d) = r?;
        loss += l;
        dsc += d;
    }
    let n = pairs.len() as f64;
    Ok((loss / n, dsc / n))
}

fn stack_pairs<'a>(items: impl Iterator<Item = (&'a Tensor, &'a Tensor)>) -> Result<(Tensor, Tensor)> {
    let (xs, ys): (Vec<&Tensor>, Vec<&Tensor>) = items.unzip();
    Ok((Tensor::stack(&xs)?, Tensor::stack(&ys)?))
}

/// Augmented copy of training sample `index` for `epoch`; depends only on
/// the seed, epoch and index.
pub fn augmented_sample(pair: &SamplePair, index: usize, epoch: usize, n: usize, cfg: &TrainConfig) -> (Tensor, Tensor) {
    if !cfg.augment.any() {
        return (pair.image.clone(), pair.mask.clone());
    }
    let stream = AUGMENT_STREAM + (epoch * n + index) as u64;
    augment(&pair.image, &pair.mask, &mut Rng::with_stream(cfg.seed, stream), &cfg.augment)
}

/// Where and how checkpoints are written.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub dir: PathBuf,
}

impl Checkpoint {
    pub fn weights_path(&self) -> PathBuf {
        self.dir.join("best.dsgw")
    }

    pub fn sidecar_path(&self) -> PathBuf {
        self.dir.join("best.cfg")
    }

    fn write(&self, store: &ParamStore, rec: &EpochRecord) -> Result<()> {
        std::fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        save_weights(store, self.weights_path())?;
        let mut kv = KeyValues::new();
        kv.set("epoch", rec.epoch);
        kv.set("lr", rec.lr);
        kv.set("best_val_loss", rec.val_loss);
        kv.write(self.sidecar_path())
    }
}

/// Runs the epoch loop. On return the model holds the weights of the epoch
/// with the lowest validation loss.
pub fn train(
    model: &mut DilatedSegNet,
    train_set: &[SamplePair],
    val_set: &[SamplePair],
    cfg: &TrainConfig,
    checkpoint: Option<&Checkpoint>,
) -> Result<History> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Dataset("training and validation sets must be non-empty".into()));
    }
    let expect = (model.config.in_channels, 1);
    for p in train_set.iter().chain(val_set) {
        if (p.image.shape().c, p.mask.shape().c) != expect || p.image.shape().h != p.mask.shape().h {
            return Err(Error::Dataset(format!(
                "sample `{}`: image {} / mask {} do not fit a {}-channel model",
                p.id,
                p.image.shape(),
                p.mask.shape(),
                expect.0
            )));
        }
    }

    let mut history = History::default();
    let mut plateau = PlateauScheduler::new(cfg.lr, cfg.plateau);
    let mut stopper = EarlyStopping::new(cfg.early_stop);
    let mut best_params = model.params.clone();
    let mut best_loss = f64::INFINITY;
    let mut trainer = Trainer::new(model, cfg);
    let n = train_set.len();

    for epoch in 1..=cfg.max_epochs {
        let lr = plateau.lr;
        let mut order: Vec<usize> = (0..n).collect();
        Rng::with_stream(cfg.seed, epoch as u64).shuffle(&mut order);

        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let samples = par_map(batch, |&i| augmented_sample(&train_set[i], i, epoch, n, cfg));
            let (x, y) = stack_pairs(samples.iter().map(|(a, b)| (a, b)))?;
            loss_sum += trainer.step(&x, &y, lr, epoch)? * batch.len() as f64;
        }

        let (val_loss, val_dsc) = validate(trainer.model, val_set, cfg)?;
        let rec = EpochRecord {
            epoch,
            train_loss: loss_sum / n as f64,
            val_loss,
            val_dsc,
            lr,
        };
        if val_loss < best_loss {
            best_loss = val_loss;
            best_params = trainer.model.params.clone();
            history.best = Some(history.epochs.len());
            if let Some(c) = checkpoint {
                c.write(&best_params, &rec)?;
            }
        }
        history.epochs.push(rec);
        plateau.step(val_loss);
        if stopper.step(val_loss) == StopDecision::Stop {
            break;
        }
    }
    trainer.model.params = best_params;
    Ok(history)
}
