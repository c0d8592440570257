//! Per-image metric tables rendered as CSV or markdown.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use super::{ConfusionCounts, Metrics};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ImageRow {
    pub id: String,
    pub counts: ConfusionCounts,
    pub metrics: Metrics,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Complexity {
    pub params: usize,
    pub macs: u64,
    pub fps: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub rows: Vec<ImageRow>,
    /// Arithmetic mean of each column over images.
    pub mean: Metrics,
    pub complexity: Option<Complexity>,
    /// Free-form `(key, value)` notes rendered under the markdown table.
    pub metadata: Vec<(String, String)>,
}

/// Published full-scale figures kept for orientation only; they come from a
/// clinical dataset on a GPU and are not comparable with synthetic runs.
pub const REFERENCE_METADATA: [(&str, &str); 3] = [
    ("reference Kvasir-SEG DSC", "0.8957"),
    ("reference Kvasir-SEG mIoU", "0.8336"),
    ("reference FPS (RTX 3090)", "33.68"),
];

impl MetricsReport {
    pub fn new(rows: Vec<ImageRow>) -> Self {
        let per: Vec<Metrics> = rows.iter().map(|r| r.metrics).collect();
        MetricsReport {
            mean: Metrics::mean(&per),
            rows,
            complexity: None,
            metadata: REFERENCE_METADATA
                .iter()
                .map(|(k, v)| (k.to_string(), format!("{v} (not reproducible at desk scale)")))
                .collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Markdown,
}

impl ReportFormat {
    /// From a file extension: `.csv`, `.md` or `.markdown`.
    pub fn from_path(path: &Path) -> Result<Self> {
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
        match ext {
            "md" => Ok(ReportFormat::Markdown),
            other => other.parse(),
        }
    }
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "markdown" => Ok(ReportFormat::Markdown),
            other => Err(Error::UnknownFormat(other.to_owned())),
        }
    }
}

fn cells(m: &Metrics) -> [f64; 5] {
    [m.dsc, m.iou, m.recall, m.precision, m.f2]
}

pub fn render_report(report: &MetricsReport, format: ReportFormat) -> String {
    let mut out = String::new();
    match format {
        ReportFormat::Csv => {
            out.push_str("id,dsc,miou,recall,precision,f2\n");
            let rows = report.rows.iter().map(|r| (r.id.as_str(), &r.metrics));
            for (id, m) in rows.chain(std::iter::once(("mean", &report.mean))) {
                out.push_str(id);
                for v in cells(m) {
                    let _ = write!(out, ",{v:.4}");
                }
                out.push('\n');
            }
        }
        ReportFormat::Markdown => {
            out.push_str("| Image | DSC | mIoU | Recall | Precision | F2 |\n");
            out.push_str("|---|---|---|---|---|---|\n");
            let rows = report.rows.iter().map(|r| (r.id.as_str(), &r.metrics));
            for (id, m) in rows.chain(std::iter::once(("**mean**", &report.mean))) {
                let _ = write!(out, "| {id} |");
                for v in cells(m) {
                    let _ = write!(out, " {v:.4} |");
                }
                out.push('\n');
            }
            if let Some(c) = &report.complexity {
                let _ = write!(
                    out,
                    "\nParameters: {:.4} M, MACs: {:.4} G",
                    c.params as f64 / 1e6,
                    c.macs as f64 / 1e9
                );
                if let Some(fps) = c.fps {
                    let _ = write!(out, ", FPS: {fps:.4}");
                }
                out.push('\n');
            }
            if !report.metadata.is_empty() {
                out.push('\n');
                for (k, v) in &report.metadata {
                    let _ = writeln!(out, "- {k}: {v}");
                }
            }
        }
    }
    out
}

pub fn emit_report(report: &MetricsReport, format: ReportFormat, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, render_report(report, format)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{metrics_from_counts, METRIC_EPS};

    fn tiny() -> MetricsReport {
        let rows = [("a", 8, 2, 2), ("b", 5, 0, 5)]
            .into_iter()
            .map(|(id, tp, fp, fn_)| {
                let counts = ConfusionCounts { tp, fp, fn_, tn: 10 };
                ImageRow {
                    id: id.into(),
                    counts,
                    metrics: metrics_from_counts(&counts, METRIC_EPS),
                }
            })
            .collect();
        MetricsReport::new(rows)
    }

    #[test]
    fn csv_golden() {
        let expected = "id,dsc,miou,recall,precision,f2\n\
                        a,0.8000,0.6667,0.8000,0.8000,0.8000\n\
                        b,0.6667,0.5000,0.5000,1.0000,0.5556\n\
                        mean,0.7333,0.5833,0.6500,0.9000,0.6778\n";
        assert_eq!(render_report(&tiny(), ReportFormat::Csv), expected);
    }

    #[test]
    fn markdown_has_table_column_order() {
        let md = render_report(&tiny(), ReportFormat::Markdown);
        assert!(md.starts_with("| Image | DSC | mIoU | Recall | Precision | F2 |"));
        assert!(md.contains("0.8957"));
    }

    #[test]
    fn unknown_format() {
        assert!(matches!("xml".parse::<ReportFormat>(), Err(Error::UnknownFormat(_))));
        assert_eq!(ReportFormat::from_path(Path::new("r.md")).unwrap(), ReportFormat::Markdown);
    }
}
