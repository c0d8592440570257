//! Seeded train/validation/test partitions.

use std::str::FromStr;

use crate::error::{Error, Result};
use crate::rng::Rng;

const RATIO_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SplitSpec {
    /// Fractions summing to 1; train and val are floored, test takes the rest.
    Ratios { train: f64, val: f64, test: f64 },
    /// Absolute train and val counts; test takes the rest.
    Counts { train: usize, val: usize },
}

impl SplitSpec {
    /// 880 train, 60 validation, remainder test.
    pub const KVASIR: SplitSpec = SplitSpec::Counts { train: 880, val: 60 };

    pub fn ratios(train: f64, val: f64, test: f64) -> Self {
        SplitSpec::Ratios { train, val, test }
    }

    /// Named presets: `kvasir`.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "kvasir" => Ok(Self::KVASIR),
            other => Err(Error::Split(format!("unknown preset `{other}`"))),
        }
    }

    /// (train, val, test) sizes for `n` items.
    pub fn sizes(&self, n: usize) -> Result<(usize, usize, usize)> {
        match *self {
            SplitSpec::Ratios { train, val, test } => {
                if [train, val, test].iter().any(|r| !(0.0..=1.0).contains(r)) {
                    return Err(Error::Split(format!("ratios {train}:{val}:{test} must lie in [0, 1]")));
                }
                let sum = train + val + test;
                if (sum - 1.0).abs() > RATIO_TOL {
                    return Err(Error::Split(format!("ratios sum to {sum}, expected 1")));
                }
                let floor = |r: f64| ((r * n as f64) + RATIO_TOL).floor() as usize;
                let (a, b) = (floor(train), floor(val));
                Ok((a, b, n - a - b))
            }
            SplitSpec::Counts { train, val } => {
                if train + val > n {
                    return Err(Error::Split(format!("counts {train}+{val} exceed {n} items")));
                }
                Ok((train, val, n - train - val))
            }
        }
    }
}

impl FromStr for SplitSpec {
    type Err = Error;

    /// `a:b:c` ratios; values above 1 are read as percentages.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<f64> = s
            .split(':')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Split(format!("cannot parse ratios `{s}`")))?;
        let [a, b, c] = parts[..] else {
            return Err(Error::Split(format!("expected three ratios, got `{s}`")));
        };
        let total = a + b + c;
        if total > 1.0 + RATIO_TOL {
            Ok(SplitSpec::ratios(a / total, b / total, c / total))
        } else {
            Ok(SplitSpec::ratios(a, b, c))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

/// Shuffles `ids` with `seed`, then cuts contiguous partitions.
pub fn split(ids: &[String], spec: &SplitSpec, seed: u64) -> Result<Split> {
    if ids.len() < 3 {
        return Err(Error::Split(format!("need at least 3 ids, got {}", ids.len())));
    }
    let (a, b, _) = spec.sizes(ids.len())?;
    let mut order = ids.to_vec();
    Rng::new(seed).shuffle(&mut order);
    let test = order.split_off(a + b);
    let val = order.split_off(a);
    Ok(Split {
        train: order,
        val,
        test,
    })
}
