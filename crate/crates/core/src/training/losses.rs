//! Dice, binary cross-entropy and their weighted sum, recorded on a graph.

use crate::error::Result;
use crate::tensor::{Graph, NodeId, Scalar};

/// Smoothing constant of the dice ratio.
pub const DICE_EPS: f64 = 1.0;
/// Probabilities are clamped to `[c, 1 − c]` before logarithms.
pub const BCE_CLAMP: f64 = 1e-7;

/// `1 − (2·Σpg + 1) / (Σp + Σg + 1)` over the whole batch.
pub fn dice_loss<T: Scalar>(g: &mut Graph<T>, p: NodeId, target: NodeId) -> Result<NodeId> {
    g.dice_loss(p, target, T::cast(DICE_EPS))
}

/// Mean binary cross-entropy on clamped probabilities.
pub fn bce_loss<T: Scalar>(g: &mut Graph<T>, p: NodeId, target: NodeId) -> Result<NodeId> {
    g.bce_loss(p, target, T::cast(BCE_CLAMP))
}

/// `w_dice·dice + w_bce·bce`.
pub fn combined_loss<T: Scalar>(g: &mut Graph<T>, p: NodeId, target: NodeId, w_dice: f64, w_bce: f64) -> Result<NodeId> {
    let d = dice_loss(g, p, target)?;
    let b = bce_loss(g, p, target)?;
    let d = g.scale(d, T::cast(w_dice));
    let b = g.scale(b, T::cast(w_bce));
    g.add(d, b)
}

/// Loss values without a graph, for validation.
pub fn combined_loss_value(p: &crate::Tensor, target: &crate::Tensor, w_dice: f64, w_bce: f64) -> Result<f64> {
    let mut g = Graph::<f32>::new();
    let pn = g.constant(p.clone());
    let tn = g.constant(target.clone());
    let l = combined_loss(&mut g, pn, tn, w_dice, w_bce)?;
    Ok(g.value(l).data()[0] as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Shape, Tensor};

    fn loss(p: Tensor<f64>, t: Tensor<f64>, f: fn(&mut Graph<f64>, NodeId, NodeId) -> Result<NodeId>) -> f64 {
        let mut g = Graph::new();
        let (p, t) = (g.constant(p), g.constant(t));
        let l = f(&mut g, p, t).unwrap();
        g.value(l).data()[0]
    }

    #[test]
    fn dice_examples() {
        let s = Shape::new(1, 1, 4, 4);
        let t = Tensor::from_fn(s, |_, _, y, x| if y * 4 + x < 10 { 1.0 } else { 0.0 });
        assert!((loss(Tensor::zeros(s), t.clone(), dice_loss) - (1.0 - 1.0 / 11.0)).abs() < 1e-12);
        assert_eq!(loss(t.clone(), t, dice_loss), 0.0);
        assert_eq!(loss(Tensor::zeros(s), Tensor::zeros(s), dice_loss), 0.0);
    }

    #[test]
    fn bce_examples() {
        let s = Shape::new(1, 1, 2, 2);
        let t = Tensor::from_fn(s, |_, _, y, _| y as f64);
        assert!((loss(Tensor::full(s, 0.5), t.clone(), bce_loss) - 2f64.ln()).abs() < 1e-12);
        assert!(loss(t.clone(), t, bce_loss) <= 1.7e-7);
    }

    #[test]
    fn combined_is_weighted_sum() {
        let s = Shape::new(2, 1, 3, 3);
        let p = Tensor::from_fn(s, |i, _, y, x| 0.1 + 0.08 * (i + y + x) as f64);
        let t = Tensor::from_fn(s, |_, _, y, x| ((y + x) % 2) as f64);
        let d = loss(p.clone(), t.clone(), dice_loss);
        let b = loss(p.clone(), t.clone(), bce_loss);
        let mut g = Graph::new();
        let (pn, tn) = (g.constant(p), g.constant(t));
        let c = combined_loss(&mut g, pn, tn, 1.0, 1.0).unwrap();
        assert!((g.value(c).data()[0] - (d + b)).abs() < 1e-12);
        let c = combined_loss(&mut g, pn, tn, 1.0, 0.0).unwrap();
        assert!((g.value(c).data()[0] - d).abs() < 1e-12);
    }
}
