//! Segmentation metrics, complexity accounting and throughput.

pub mod complexity;
pub mod report;

use std::str::FromStr;

use crate::data::SamplePair;
use crate::error::{Error, Result};
use crate::model::DilatedSegNet;
use crate::tensor::{par_map, Execution, Tensor};

pub use complexity::{count_macs, count_macs_on_graph, count_params, measure_fps, FpsReport, MacCounter};
pub use report::{emit_report, render_report, Complexity, ImageRow, MetricsReport, ReportFormat};

/// Smoothing term of every ratio.
pub const METRIC_EPS: f64 = 1e-7;
/// Probabilities at or above this count as foreground.
pub const THRESHOLD: f32 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// Counts with foreground and background swapped.
    pub fn inverted(&self) -> Self {
        ConfusionCounts {
            tp: self.tn,
            fp: self.fn_,
            fn_: self.fp,
            tn: self.tp,
        }
    }
}

/// Binarises `pred` at `pred >= threshold` and tallies against binary `gt`.
pub fn confusion(pred: &Tensor, gt: &Tensor, threshold: f32) -> Result<ConfusionCounts> {
    if pred.shape() != gt.shape() {
        return Err(Error::dim("confusion", format!("{} vs {}", pred.shape(), gt.shape())));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        match (p >= threshold, g >= 0.5) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Metrics {
    pub dsc: f64,
    pub iou: f64,
    pub recall: f64,
    pub precision: f64,
    pub f2: f64,
}

impl Metrics {
    pub fn mean(items: &[Metrics]) -> Metrics {
        let n = items.len().max(1) as f64;
        let sum = |f: fn(&Metrics) -> f64| items.iter().map(f).sum::<f64>() / n;
        Metrics {
            dsc: sum(|m| m.dsc),
            iou: sum(|m| m.iou),
            recall: sum(|m| m.recall),
            precision: sum(|m| m.precision),
            f2: sum(|m| m.f2),
        }
    }
}

pub fn metrics_from_counts(c: &ConfusionCounts, eps: f64) -> Metrics {
    let (tp, fp, fn_) = (c.tp as f64, c.fp as f64, c.fn_ as f64);
    let precision = (tp + eps) / (tp + fp + eps);
    let recall = (tp + eps) / (tp + fn_ + eps);
    Metrics {
        dsc: (2.0 * tp + eps) / (2.0 * tp + fp + fn_ + eps),
        iou: (tp + eps) / (tp + fp + fn_ + eps),
        recall,
        precision,
        f2: f2_score(precision, recall, eps),
    }
}

/// `5·P·R / (4·P + R)`, with the denominator floored at `eps`.
pub fn f2_score(precision: f64, recall: f64, eps: f64) -> f64 {
    5.0 * precision * recall / (4.0 * precision + recall).max(eps)
}

/// How the IoU column is averaged within an image.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum IouConvention {
    /// Foreground IoU only.
    #[default]
    Foreground,
    /// Mean of foreground and background IoU.
    WithBackground,
}

impl FromStr for IouConvention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "foreground" => Ok(IouConvention::Foreground),
            "with-background" => Ok(IouConvention::WithBackground),
            other => Err(Error::Config(format!(
                "unknown IoU convention `{other}` (expected foreground or with-background)"
            ))),
        }
    }
}

/// Metrics of one image under `convention`.
pub fn image_metrics(c: &ConfusionCounts, convention: IouConvention) -> Metrics {
    let mut m = metrics_from_counts(c, METRIC_EPS);
    if convention == IouConvention::WithBackground {
        m.iou = 0.5 * (m.iou + metrics_from_counts(&c.inverted(), METRIC_EPS).iou);
    }
    m
}

/// Eval-mode predictions over `pairs`, scored per image and averaged over images.
pub fn evaluate_dataset(model: &DilatedSegNet, pairs: &[SamplePair], convention: IouConvention) -> Result<MetricsReport> {
    if pairs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let rows = par_map(pairs, |p| -> Result<ImageRow> {
        let pred = model.predict_full(&p.image, Execution::Sequential)?.mask;
        let counts = confusion(&pred, &p.mask, THRESHOLD)?;
        Ok(ImageRow {
            id: p.id.clone(),
            counts,
            metrics: image_metrics(&counts, convention),
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport::new(rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn counting_example() {
        let gt = Tensor::from_fn(Shape::new(1, 1, 1, 20), |_, _, _, x| if x < 10 { 1.0 } else { 0.0 });
        let pred = Tensor::from_fn(Shape::new(1, 1, 1, 20), |_, _, _, x| if (2..12).contains(&x) { 0.9 } else { 0.1 });
        let c = confusion(&pred, &gt, THRESHOLD).unwrap();
        assert_eq!((c.tp, c.fp, c.fn_, c.tn), (8, 2, 2, 8));
        let m = metrics_from_counts(&c, METRIC_EPS);
        assert!((m.dsc - 0.8).abs() < 1e-6);
        assert!((m.iou - 2.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn threshold_is_inclusive() {
        let t = Tensor::full(Shape::new(1, 1, 1, 1), 0.5f32);
        assert_eq!(confusion(&t, &t, 0.5).unwrap().tp, 1);
    }

    #[test]
    fn f2_example() {
        assert!((f2_score(0.5, 1.0, METRIC_EPS) - 2.5 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn with_background_averages_both_classes() {
        let c = ConfusionCounts { tp: 8, fp: 2, fn_: 2, tn: 8 };
        let m = image_metrics(&c, IouConvention::WithBackground);
        assert!((m.iou - 2.0 / 3.0).abs() < 1e-6);
        let c = ConfusionCounts { tp: 1, fp: 1, fn_: 0, tn: 8 };
        let m = image_metrics(&c, IouConvention::WithBackground);
        assert!((m.iou - 0.5 * (0.5 + 8.0 / 9.0)).abs() < 1e-6);
    }
}
