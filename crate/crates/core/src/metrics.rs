//! Depth and segmentation evaluation.
//!
//! Depth maps use 0 for invalid pixels, matching the stored disparity
//! convention.

use std::fmt;
use std::io::Write;

use crate::data::Calibration;
use crate::error::{Error, Result};
use crate::losses::IGNORE_LABEL;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub min_depth: f64,
    pub max_depth: f64,
    /// Accuracy k counts pixels whose depth ratio is below `base^k`.
    pub delta_base: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            min_depth: 1e-3,
            max_depth: 80.0,
            delta_base: 1.25,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.min_depth > 0.0 && self.min_depth < self.max_depth && self.max_depth.is_finite())
        {
            return Err(Error::Config(format!(
                "depth range [{}, {}] must satisfy 0 < min < max",
                self.min_depth, self.max_depth
            )));
        }
        if !(self.delta_base > 1.0 && self.delta_base.is_finite()) {
            return Err(Error::Config(format!(
                "delta base {} must exceed 1",
                self.delta_base
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DepthMetrics {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
}

impl DepthMetrics {
    pub const COLUMNS: [&'static str; 7] = [
        "abs_rel", "sq_rel", "rmse", "rmse_log", "delta1", "delta2", "delta3",
    ];

    pub fn values(&self) -> [f64; 7] {
        [
            self.abs_rel,
            self.sq_rel,
            self.rmse,
            self.rmse_log,
            self.delta1,
            self.delta2,
            self.delta3,
        ]
    }

    /// Column-wise mean.
    pub fn mean(items: &[DepthMetrics]) -> Option<DepthMetrics> {
        if items.is_empty() {
            return None;
        }
        let n = items.len() as f64;
        let mut acc = [0.0; 7];
        for m in items {
            for (a, v) in acc.iter_mut().zip(m.values()) {
                *a += v;
            }
        }
        let [abs_rel, sq_rel, rmse, rmse_log, delta1, delta2, delta3] = acc.map(|a| a / n);
        Some(DepthMetrics {
            abs_rel,
            sq_rel,
            rmse,
            rmse_log,
            delta1,
            delta2,
            delta3,
        })
    }
}

impl fmt::Display for DepthMetrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "abs_rel {:.4}  sq_rel {:.4}  rmse {:.4}  rmse_log {:.4}  d1 {:.4}  d2 {:.4}  d3 {:.4}",
            self.abs_rel,
            self.sq_rel,
            self.rmse,
            self.rmse_log,
            self.delta1,
            self.delta2,
            self.delta3
        )
    }
}

/// `focal * baseline / d`, unclamped; `None` where `d <= 0`.
pub fn depth_from_disparity(d: f64, calib: &Calibration) -> Option<f64> {
    (d > 0.0).then(|| calib.focal_px * calib.baseline_m / d)
}

/// Inverse of [`depth_from_disparity`].
pub fn disparity_from_depth(z: f64, calib: &Calibration) -> Option<f64> {
    (z > 0.0).then(|| calib.focal_px * calib.baseline_m / z)
}

/// Converts a disparity map in pixels to depth in meters, clamped to the
/// configured range. Pixels with `d <= 0` map to 0 (invalid).
pub fn disparity_to_depth(
    disparity: &[f32],
    calib: &Calibration,
    cfg: &EvalConfig,
) -> Result<Vec<f64>> {
    calib.validate()?;
    if disparity.iter().any(|d| !d.is_finite()) {
        return Err(Error::invalid("disparity_to_depth", "non-finite disparity"));
    }
    Ok(disparity
        .iter()
        .map(|&d| {
            depth_from_disparity(d as f64, calib)
                .map_or(0.0, |z| z.clamp(cfg.min_depth, cfg.max_depth))
        })
        .collect())
}

/// Error and accuracy statistics over pixels with valid (positive) ground
/// truth. Predictions are clamped to the configured depth range first.
pub fn depth_metrics(pred: &[f64], gt: &[f64], cfg: &EvalConfig) -> Result<DepthMetrics> {
    cfg.validate()?;
    if pred.len() != gt.len() {
        return Err(Error::invalid(
            "depth_metrics",
            format!(
                "{} predicted vs {} ground-truth pixels",
                pred.len(),
                gt.len()
            ),
        ));
    }
    let thresholds = [1, 2, 3].map(|k| cfg.delta_base.powi(k));
    let (mut n, mut abs_rel, mut sq_rel, mut sq, mut sq_log) = (0usize, 0.0, 0.0, 0.0, 0.0);
    let mut hits = [0usize; 3];
    for (&p, &g) in pred.iter().zip(gt) {
        if !(g > 0.0 && g.is_finite()) {
            continue;
        }
        let p = if p.is_finite() {
            p.clamp(cfg.min_depth, cfg.max_depth)
        } else {
            cfg.max_depth
        };
        let e = p - g;
        n += 1;
        abs_rel += e.abs() / g;
        sq_rel += e * e / g;
        sq += e * e;
        let l = p.ln() - g.ln();
        sq_log += l * l;
        let ratio = (p / g).max(g / p);
        for (h, t) in hits.iter_mut().zip(thresholds) {
            *h += (ratio < t) as usize;
        }
    }
    if n == 0 {
        return Err(Error::EmptyReduction {
            op: "depth_metrics",
        });
    }
    let nf = n as f64;
    Ok(DepthMetrics {
        abs_rel: abs_rel / nf,
        sq_rel: sq_rel / nf,
        rmse: (sq / nf).sqrt(),
        rmse_log: (sq_log / nf).sqrt(),
        delta1: hits[0] as f64 / nf,
        delta2: hits[1] as f64 / nf,
        delta3: hits[2] as f64 / nf,
    })
}

/// Fraction of non-ignored pixels labelled correctly.
pub fn semantic_accuracy(pred: &[u8], gt: &[u8]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::invalid(
            "semantic_accuracy",
            format!(
                "{} predicted vs {} ground-truth labels",
                pred.len(),
                gt.len()
            ),
        ));
    }
    let (mut n, mut hit) = (0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        if g != IGNORE_LABEL {
            n += 1;
            hit += (p == g) as usize;
        }
    }
    if n == 0 {
        return Err(Error::EmptyReduction {
            op: "semantic_accuracy",
        });
    }
    Ok(hit as f64 / n as f64)
}

/// Averages a prediction with the mirrored prediction made on the mirrored
/// input: `0.5 * (d + mirror(d_flip))`.
pub fn postprocess_flip(d: &Tensor<f32>, d_flip: &Tensor<f32>) -> Result<Tensor<f32>> {
    if d.shape() != d_flip.shape() {
        return Err(Error::ShapeMismatch {
            op: "postprocess_flip",
            lhs: d.shape(),
            rhs: d_flip.shape(),
        });
    }
    let back = d_flip.flip_horizontal();
    let data = d
        .data()
        .iter()
        .zip(back.data())
        .map(|(a, b)| 0.5 * (a + b))
        .collect();
    Tensor::from_vec(d.shape(), data)
}

/// One line of an evaluation report.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub sample: String,
    pub depth: DepthMetrics,
    pub semantic_accuracy: Option<f64>,
}

pub const CSV_HEADER: &str =
    "sample,abs_rel,sq_rel,rmse,rmse_log,delta1,delta2,delta3,semantic_accuracy";

/// Mean over rows; semantic accuracy averages the rows that have one.
pub fn aggregate(rows: &[MetricRow], name: &str) -> Option<MetricRow> {
    let depth = DepthMetrics::mean(&rows.iter().map(|r| r.depth).collect::<Vec<_>>())?;
    let sem: Vec<f64> = rows.iter().filter_map(|r| r.semantic_accuracy).collect();
    Some(MetricRow {
        sample: name.to_string(),
        depth,
        semantic_accuracy: (!sem.is_empty()).then(|| sem.iter().sum::<f64>() / sem.len() as f64),
    })
}

fn write_row<W: Write>(w: &mut W, row: &MetricRow) -> std::io::Result<()> {
    write!(w, "{}", row.sample)?;
    for v in row.depth.values() {
        write!(w, ",{v:.6}")?;
    }
    match row.semantic_accuracy {
        Some(a) => writeln!(w, ",{a:.6}"),
        None => writeln!(w, ","),
    }
}

/// Header, one line per row, then a `mean` line.
pub fn write_metrics_csv<W: Write>(w: &mut W, rows: &[MetricRow]) -> std::io::Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for r in rows {
        write_row(w, r)?;
    }
    if let Some(mean) = aggregate(rows, "mean") {
        write_row(w, &mean)?;
    }
    Ok(())
}
