//! Confusion-matrix metrics, multi-run aggregation, and classification maps.

use std::fmt::Write as _;
use std::path::Path;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::data::GroundTruthMap;
use crate::error::{bail, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// `confusion[true][pred]`, 0-based class index.
    pub confusion: Vec<Vec<u64>>,
    pub per_class_acc: Vec<f64>,
    pub oa: f64,
    pub aa: f64,
    pub kappa: f64,
    pub n_test: u64,
}

/// Metrics of 1-based labels over `n` classes.
pub fn compute_metrics(truth: &[u16], pred: &[u16], n: usize) -> Result<MetricsReport> {
    if truth.is_empty() {
        bail!(Metric, "no test samples");
    }
    if truth.len() != pred.len() {
        bail!(Metric, "{} labels but {} predictions", truth.len(), pred.len());
    }
    let mut confusion = vec![vec![0u64; n]; n];
    for (&t, &p) in truth.iter().zip(pred) {
        for l in [t, p] {
            if l == 0 || l as usize > n {
                bail!(Metric, "label {l} outside 1..={n}");
            }
        }
        confusion[t as usize - 1][p as usize - 1] += 1;
    }
    from_confusion(confusion)
}

pub fn from_confusion(confusion: Vec<Vec<u64>>) -> Result<MetricsReport> {
    let n = confusion.len();
    let rows: Vec<u64> = confusion.iter().map(|r| r.iter().sum()).collect();
    let cols: Vec<u64> = (0..n).map(|j| confusion.iter().map(|r| r[j]).sum()).collect();
    let total: u64 = rows.iter().sum();
    if total == 0 {
        bail!(Metric, "no test samples");
    }
    if let Some(m) = rows.iter().position(|&r| r == 0) {
        bail!(Metric, "class {} has no test samples", m + 1);
    }
    let trace: u64 = (0..n).map(|m| confusion[m][m]).sum();
    let per_class_acc: Vec<f64> = (0..n).map(|m| confusion[m][m] as f64 / rows[m] as f64).collect();
    let oa = trace as f64 / total as f64;
    let aa = per_class_acc.iter().sum::<f64>() / n as f64;
    let tf = total as f64;
    let pe = rows.iter().zip(&cols).map(|(&r, &c)| r as f64 * c as f64).sum::<f64>() / (tf * tf);
    let kappa = if pe == 1.0 { 1.0 } else { (oa - pe) / (1.0 - pe) };
    Ok(MetricsReport {
        confusion,
        per_class_acc,
        oa,
        aa,
        kappa,
        n_test: total,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Mean and sample standard deviation (0 for a single value).
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Self { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub n_runs: usize,
    pub oa: MeanStd,
    pub aa: MeanStd,
    pub kappa: MeanStd,
    pub per_class: Vec<MeanStd>,
}

pub fn aggregate_runs(reports: &[MetricsReport]) -> Result<AggregateReport> {
    let Some(first) = reports.first() else {
        bail!(Contract, "no reports to aggregate");
    };
    let n = first.per_class_acc.len();
    if let Some(r) = reports.iter().find(|r| r.per_class_acc.len() != n) {
        bail!(Contract, "report with {} classes among reports with {n}", r.per_class_acc.len());
    }
    let pick = |f: &dyn Fn(&MetricsReport) -> f64| MeanStd::of(&reports.iter().map(f).collect::<Vec<_>>());
    Ok(AggregateReport {
        n_runs: reports.len(),
        oa: pick(&|r| r.oa),
        aa: pick(&|r| r.aa),
        kappa: pick(&|r| r.kappa),
        per_class: (0..n).map(|m| pick(&|r| r.per_class_acc[m])).collect(),
    })
}

/// Table of per-class accuracy, OA, AA and Kappa in percent, as `mean ± std`.
pub fn render_table(agg: &AggregateReport, class_names: Option<&[String]>) -> String {
    let mut s = String::new();
    let fmt = |m: MeanStd| format!("{:6.2} ± {:5.2}", 100.0 * m.mean, 100.0 * m.std);
    let _ = writeln!(s, "{:<24} {}", "Class", format_args!("Accuracy % ({} runs)", agg.n_runs));
    for (i, m) in agg.per_class.iter().enumerate() {
        let name = class_names
            .and_then(|n| n.get(i).cloned())
            .unwrap_or_else(|| format!("{}", i + 1));
        let _ = writeln!(s, "{:<24} {}", name, fmt(*m));
    }
    let _ = writeln!(s, "{:<24} {}", "OA", fmt(agg.oa));
    let _ = writeln!(s, "{:<24} {}", "AA", fmt(agg.aa));
    let _ = writeln!(s, "{:<24} {}", "Kappa", fmt(agg.kappa));
    s
}

/// Distinct deterministic color for 1-based class `c`.
pub fn default_color(c: u16) -> [u8; 3] {
    const BASE: [[u8; 3]; 16] = [
        [230, 25, 75],
        [60, 180, 75],
        [255, 225, 25],
        [0, 130, 200],
        [245, 130, 48],
        [145, 30, 180],
        [70, 240, 240],
        [240, 50, 230],
        [210, 245, 60],
        [250, 190, 212],
        [0, 128, 128],
        [220, 190, 255],
        [170, 110, 40],
        [255, 250, 200],
        [128, 0, 0],
        [170, 255, 195],
    ];
    let i = (c as usize).saturating_sub(1);
    let b = BASE[i % 16];
    // beyond 16 classes, darken each further cycle
    let f = 1.0 / (1 + i / 16) as f32;
    [(b[0] as f32 * f) as u8, (b[1] as f32 * f) as u8, (b[2] as f32 * f) as u8]
}

pub fn default_palette(n: u16) -> Vec<[u8; 3]> {
    (1..=n).map(default_color).collect()
}

/// Color each labeled pixel by its predicted class (`palette[c - 1]`); unlabeled pixels
/// are black.
pub fn render_map(gt: &GroundTruthMap, predictions: &[u16], palette: &[[u8; 3]]) -> Result<RgbImage> {
    if predictions.len() != gt.labels.len() {
        bail!(Render, "{} predictions for a {}x{} map", predictions.len(), gt.height, gt.width);
    }
    let mut img = RgbImage::new(gt.width as u32, gt.height as u32);
    for (i, (&l, &p)) in gt.labels.iter().zip(predictions).enumerate() {
        let color = if l == 0 {
            [0, 0, 0]
        } else {
            match palette.get((p as usize).wrapping_sub(1)) {
                Some(&c) if p > 0 => c,
                _ => bail!(Render, "palette has no color for class {p}"),
            }
        };
        img.put_pixel((i % gt.width) as u32, (i / gt.width) as u32, Rgb(color));
    }
    Ok(img)
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Render(format!("{}: {e}", path.display())))
}
