//! Layered run settings: preset defaults, then a config file, then flags.

use std::path::Path;
use std::str::FromStr;

use dilated_seg::config::KeyValues;
use dilated_seg::data::{SplitSpec, SynthConfig};
use dilated_seg::model::{ModelConfig, Preset};
use dilated_seg::tensor::Execution;
use dilated_seg::training::{AugmentConfig, EarlyStopConfig, PlateauConfig, TrainConfig};
use dilated_seg::{Error, Result};

pub const SYNTH_KEYS: &[&str] = &[
    "count",
    "size",
    "blobs_min",
    "blobs_max",
    "radius_min",
    "radius_max",
    "noise",
    "smoothing",
    "seed",
];

pub const TRAIN_KEYS: &[&str] = &[
    "preset",
    "size",
    "use_dcp",
    "use_cbam",
    "lr",
    "batch_size",
    "max_epochs",
    "seed",
    "plateau_factor",
    "plateau_patience",
    "plateau_min_delta",
    "min_lr",
    "early_stop_patience",
    "early_stop_min_delta",
    "augment",
    "aug_prob",
    "w_dice",
    "w_bce",
    "split",
    "split_seed",
    "parallel",
];

/// Effective settings for one command, in a stable key order.
#[derive(Clone, Debug)]
pub struct Settings {
    kv: KeyValues,
}

impl Settings {
    /// Starts from `defaults`, applies `file` (rejecting keys outside
    /// `allowed`), then the `flags` that were given.
    pub fn resolve(
        defaults: KeyValues,
        file: Option<&Path>,
        allowed: &[&str],
        flags: &[(&str, Option<String>)],
    ) -> Result<Self> {
        let mut kv = defaults;
        if let Some(path) = file {
            let f = KeyValues::read(path)?;
            f.reject_unknown(allowed)?;
            for (k, v) in f.entries() {
                kv.set(k.clone(), v);
            }
        }
        for (k, v) in flags {
            if let Some(v) = v {
                kv.set(*k, v);
            }
        }
        Ok(Settings { kv })
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        self.kv
            .parse_value(key)?
            .ok_or_else(|| Error::Config(format!("missing setting `{key}`")))
    }

    pub fn size(&self) -> Result<(usize, usize)> {
        parse_size(self.kv.get("size").unwrap_or_default())
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.kv.write(dir.join("resolved.cfg"))
    }

    pub fn synth(&self) -> Result<SynthConfig> {
        let cfg = SynthConfig {
            count: self.get("count")?,
            size: self.size()?,
            blobs: (self.get("blobs_min")?, self.get("blobs_max")?),
            radius: (self.get("radius_min")?, self.get("radius_max")?),
            noise: self.get("noise")?,
            smoothing: self.get("smoothing")?,
            seed: self.get("seed")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn model(&self) -> Result<ModelConfig> {
        let preset: Preset = self.get("preset")?;
        let (h, w) = self.size()?;
        let cfg = ModelConfig::from_preset(preset)
            .with_input_size(h, w)
            .with_ablation(self.get("use_dcp")?, self.get("use_cbam")?);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let augment = if self.get::<bool>("augment")? {
            AugmentConfig {
                prob: self.get("aug_prob")?,
                ..AugmentConfig::default()
            }
        } else {
            AugmentConfig::none()
        };
        let cfg = TrainConfig {
            lr: self.get("lr")?,
            batch_size: self.get("batch_size")?,
            max_epochs: self.get("max_epochs")?,
            plateau: PlateauConfig {
                factor: self.get("plateau_factor")?,
                patience: self.get("plateau_patience")?,
                min_lr: self.get("min_lr")?,
                min_delta: self.get("plateau_min_delta")?,
            },
            early_stop: EarlyStopConfig {
                patience: self.get("early_stop_patience")?,
                min_delta: self.get("early_stop_min_delta")?,
            },
            seed: self.get("seed")?,
            augment,
            w_dice: self.get("w_dice")?,
            w_bce: self.get("w_bce")?,
            exec: if self.get::<bool>("parallel")? {
                Execution::Parallel
            } else {
                Execution::Sequential
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn split(&self) -> Result<SplitSpec> {
        parse_split(self.kv.get("split").unwrap_or_default())
    }
}

/// `HxW` or a single side for square inputs.
pub fn parse_size(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::Config(format!("invalid size `{s}` (expected HxW, e.g. 64x64)"));
    let (h, w) = match s.split_once(['x', 'X']) {
        Some((h, w)) => (h, w),
        None => (s, s),
    };
    let h = h.trim().parse().map_err(|_| bad())?;
    let w = w.trim().parse().map_err(|_| bad())?;
    Ok((h, w))
}

/// A named preset (`kvasir`) or a `train:val:test` ratio string.
pub fn parse_split(s: &str) -> Result<SplitSpec> {
    if s.contains(':') {
        s.parse()
    } else {
        SplitSpec::preset(s)
    }
}

fn fmt_size((h, w): (usize, usize)) -> String {
    format!("{h}x{w}")
}

pub fn synth_defaults() -> KeyValues {
    let c = SynthConfig::default();
    let mut kv = KeyValues::new();
    kv.set("count", c.count);
    kv.set("size", fmt_size(c.size));
    kv.set("blobs_min", c.blobs.0);
    kv.set("blobs_max", c.blobs.1);
    kv.set("radius_min", c.radius.0);
    kv.set("radius_max", c.radius.1);
    kv.set("noise", c.noise);
    kv.set("smoothing", c.smoothing);
    kv.set("seed", c.seed);
    kv
}

pub fn model_defaults(preset: Preset) -> KeyValues {
    let m = ModelConfig::from_preset(preset);
    let mut kv = KeyValues::new();
    kv.set("preset", preset);
    kv.set("size", fmt_size(m.input_size));
    kv.set("use_dcp", m.use_dcp);
    kv.set("use_cbam", m.use_cbam);
    kv
}

pub fn train_defaults(preset: Preset) -> KeyValues {
    let t = TrainConfig::for_preset(preset);
    let mut kv = model_defaults(preset);
    kv.set("lr", t.lr);
    kv.set("batch_size", t.batch_size);
    kv.set("max_epochs", t.max_epochs);
    kv.set("seed", t.seed);
    kv.set("plateau_factor", t.plateau.factor);
    kv.set("plateau_patience", t.plateau.patience);
    kv.set("plateau_min_delta", t.plateau.min_delta);
    kv.set("min_lr", t.plateau.min_lr);
    kv.set("early_stop_patience", t.early_stop.patience);
    kv.set("early_stop_min_delta", t.early_stop.min_delta);
    kv.set("augment", t.augment.any());
    kv.set("aug_prob", AugmentConfig::default().prob);
    kv.set("w_dice", t.w_dice);
    kv.set("w_bce", t.w_bce);
    kv.set("split", "80:10:10");
    kv.set("split_seed", t.seed);
    kv.set("parallel", t.exec == Execution::Parallel);
    kv
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes() {
        assert_eq!(parse_size("64x96").unwrap(), (64, 96));
        assert_eq!(parse_size("128").unwrap(), (128, 128));
        assert!(parse_size("64by64").is_err());
    }

    #[test]
    fn flags_beat_file_beat_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "lr = 0.005\nbatch_size = 4\n").unwrap();
        let s = Settings::resolve(
            train_defaults(Preset::Desk),
            Some(&path),
            TRAIN_KEYS,
            &[("batch_size", Some("8".into())), ("seed", None)],
        )
        .unwrap();
        let t = s.train().unwrap();
        assert_eq!(t.lr, 0.005);
        assert_eq!(t.batch_size, 8);
        assert_eq!(t.seed, TrainConfig::for_preset(Preset::Desk).seed);
    }

    #[test]
    fn unknown_file_key_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "lr = 0.005\nlearning_rate = 1\n").unwrap();
        let err = Settings::resolve(train_defaults(Preset::Desk), Some(&path), TRAIN_KEYS, &[]).unwrap_err();
        assert!(err.to_string().contains("learning_rate"));
    }
}
