//! Central finite-difference verification of analytic gradients.

use super::{Graph, NodeId, Shape, Tensor};
use crate::error::Result;
use crate::rng::Rng;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub tol: f64,
    /// Above this many input coordinates a seeded random subset of this size is checked.
    pub max_coords: usize,
    pub seed: u64,
    /// Relative step: `h = step · max(1, |x|)`.
    pub step: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            tol: 1e-4,
            max_coords: 512,
            seed: 0,
            step: 1e-5,
        }
    }
}

impl GradCheckConfig {
    pub fn with_tol(tol: f64) -> Self {
        GradCheckConfig {
            tol,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Flat index of the coordinate with the largest error.
    pub worst_index: Option<usize>,
    pub checked: usize,
    pub non_finite: bool,
    pub pass: bool,
}

/// Compares the gradient of the scalar `f(x)` with central differences.
///
/// Relative error per coordinate is `|a − n| / max(|a|, |n|, 1e-8)`; the check
/// passes when every checked coordinate is within `cfg.tol` and all values are
/// finite.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, NodeId) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let xid = g.variable(x.clone());
    let loss = f(&mut g, xid)?;
    g.backward(loss)?;
    let analytic = g
        .grad(xid)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));
    let mut non_finite = !g.value(loss).all_finite() || !analytic.all_finite();

    let eval = |t: Tensor<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let id = g.variable(t);
        let l = f(&mut g, id)?;
        Ok(g.value(l).data()[0])
    };

    let coords: Vec<usize> = if x.len() > cfg.max_coords {
        let mut all: Vec<usize> = (0..x.len()).collect();
        Rng::new(cfg.seed).shuffle(&mut all);
        let mut pick = all[..cfg.max_coords].to_vec();
        pick.sort_unstable();
        pick
    } else {
        (0..x.len()).collect()
    };

    let mut max_rel_err = 0.0f64;
    let mut worst_index = None;
    for &k in &coords {
        let x0 = x.data()[k];
        let h = cfg.step * x0.abs().max(1.0);
        let mut plus = x.clone();
        plus.data_mut()[k] = x0 + h;
        let mut minus = x.clone();
        minus.data_mut()[k] = x0 - h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let a = analytic.data()[k];
        if !numeric.is_finite() {
            non_finite = true;
            continue;
        }
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        if rel > max_rel_err || worst_index.is_none() {
            max_rel_err = max_rel_err.max(rel);
            worst_index = Some(k);
        }
    }
    Ok(GradCheckReport {
        max_rel_err,
        worst_index,
        checked: coords.len(),
        non_finite,
        pass: !non_finite && max_rel_err <= cfg.tol,
    })
}

/// Seeded standard-normal tensor for check fixtures.
pub fn random_tensor(shape: Shape, rng: &mut Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| rng.normal())
}
