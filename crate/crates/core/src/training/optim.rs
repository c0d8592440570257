//! Adam, plateau learning-rate reduction and early stopping.

use crate::error::{Error, Result};
use crate::model::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug)]
pub struct Adam<T = f32> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Completed steps.
    pub t: u64,
    moments: Vec<Option<(Vec<T>, Vec<T>)>>,
}

impl<T: Scalar> Default for Adam<T> {
    fn default() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            moments: Vec::new(),
        }
    }
}

impl<T: Scalar> Adam<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// First and second moments of a parameter, once it has been stepped.
    pub fn moments(&self, id: ParamId) -> Option<(&[T], &[T])> {
        self.moments
            .get(id.index())
            .and_then(|m| m.as_ref())
            .map(|(m, v)| (m.as_slice(), v.as_slice()))
    }

    /// One bias-corrected update. Every gradient is checked first, so a
    /// non-finite value aborts the step without touching any state.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, Tensor<T>)], lr: f64) -> Result<()> {
        for (id, g) in grads {
            if !g.all_finite() {
                return Err(Error::NonFiniteGradient(store.get(*id).name.clone()));
            }
            if g.shape() != store.value(*id).shape() {
                return Err(Error::dim(
                    "adam_step",
                    format!("{}: gradient {} vs parameter {}", store.get(*id).name, g.shape(), store.value(*id).shape()),
                ));
            }
        }
        self.t += 1;
        let t = self.t as i32;
        let (b1, b2) = (T::cast(self.beta1), T::cast(self.beta2));
        let c1 = T::cast(1.0 - self.beta1.powi(t));
        let c2 = T::cast(1.0 - self.beta2.powi(t));
        let (lr_t, eps) = (T::cast(lr), T::cast(self.eps));
        let one = T::one();
        for (id, g) in grads {
            if self.moments.len() <= id.index() {
                self.moments.resize(id.index() + 1, None);
            }
            let n = g.len();
            let (m, v) = self.moments[id.index()].get_or_insert_with(|| (vec![T::zero(); n], vec![T::zero(); n]));
            for ((mi, vi), &gi) in m.iter_mut().zip(v.iter_mut()).zip(g.data()) {
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
            }
            if lr == 0.0 {
                continue;
            }
            let theta = store.value_mut(*id).data_mut();
            for ((p, &mi), &vi) in theta.iter_mut().zip(m.iter()).zip(v.iter()) {
                let m_hat = mi / c1;
                let v_hat = vi / c2;
                *p -= lr_t * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlateauConfig {
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
    pub min_delta: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        PlateauConfig {
            factor: 0.1,
            patience: 5,
            min_lr: 1e-7,
            min_delta: 1e-4,
        }
    }
}

/// Multiplies the learning rate by `factor` after `patience` consecutive
/// epochs whose validation loss fails to beat the best by `min_delta`.
#[derive(Clone, Debug)]
pub struct PlateauScheduler {
    pub cfg: PlateauConfig,
    pub lr: f64,
    best: f64,
    bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, cfg: PlateauConfig) -> Self {
        PlateauScheduler {
            cfg,
            lr,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    /// Records one validation loss and returns the learning rate for the next epoch.
    pub fn step(&mut self, val_loss: f64) -> f64 {
        if val_loss < self.best - self.cfg.min_delta {
            self.best = val_loss;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.cfg.patience {
                self.lr = (self.lr * self.cfg.factor).max(self.cfg.min_lr);
                self.bad_epochs = 0;
            }
        }
        self.lr
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EarlyStopConfig {
    pub patience: usize,
    pub min_delta: f64,
}

impl Default for EarlyStopConfig {
    fn default() -> Self {
        EarlyStopConfig {
            patience: 20,
            min_delta: 1e-4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop,
}

#[derive(Clone, Debug)]
pub struct EarlyStopping {
    pub cfg: EarlyStopConfig,
    best: f64,
    bad_epochs: usize,
}

impl EarlyStopping {
    pub fn new(cfg: EarlyStopConfig) -> Self {
        EarlyStopping {
            cfg,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    pub fn step(&mut self, val_loss: f64) -> StopDecision {
        if val_loss < self.best - self.cfg.min_delta {
            self.best = val_loss;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
        }
        if self.bad_epochs >= self.cfg.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }
}
