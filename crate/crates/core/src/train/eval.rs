use std::path::{Path, PathBuf};

use crate::data::{encode_disparity, write_pgm16, write_pgm8, StereoSample};
use crate::error::{Error, Result};
use crate::losses::IGNORE_LABEL;
use crate::metrics::{
    depth_metrics, disparity_to_depth, postprocess_flip, semantic_accuracy, EvalConfig, MetricRow,
};
use crate::network::{forward_with, Heads, ModelParams};
use crate::tensor::{Graph, Shape, Tensor};

/// Full-resolution left disparity (1, 1, H, W) and class logits
/// (1, C, H, W) for a (1, 3, H, W) image.
pub fn infer(params: &ModelParams, image: &Tensor<f32>) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let cfg = params.config();
    let s = image.shape();
    if s != Shape::new(1, 3, cfg.height, cfg.width) {
        return Err(Error::Config(format!(
            "image is {}x{}, model expects {}x{}",
            s.width(),
            s.height(),
            cfg.width,
            cfg.height
        )));
    }
    let mut g = Graph::<f32>::new();
    let vars: Vec<_> = params
        .tensors()
        .iter()
        .map(|t| Some(g.constant(t.clone())))
        .collect();
    let input = g.constant(image.clone());
    let (pyramid, logits) = forward_with(&mut g, cfg, &vars, input, Heads::Both)?;
    let logits = logits.expect("both heads evaluated");
    Ok((g.value(pyramid[0].left).clone(), g.value(logits).clone()))
}

fn argmax_labels(logits: &Tensor<f32>) -> Vec<u8> {
    let s = logits.shape();
    let plane = s.plane();
    (0..plane)
        .map(|p| {
            let mut best = 0;
            for c in 1..s.channels() {
                if logits.data()[c * plane + p] > logits.data()[best * plane + p] {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// Left disparity in pixels, (1, 1, H, W).
    pub disparity: Tensor<f32>,
    /// Argmax class per pixel, row-major.
    pub labels: Vec<u8>,
}

/// Disparity (optionally flip-averaged) and labels for one image. The
/// post-processing touches only the disparity.
pub fn predict(params: &ModelParams, image: &Tensor<f32>, pp: bool) -> Result<Prediction> {
    let (disparity, logits) = infer(params, image)?;
    let disparity = if pp {
        let (flipped, _) = infer(params, &image.flip_horizontal())?;
        postprocess_flip(&disparity, &flipped)?
    } else {
        disparity
    };
    Ok(Prediction {
        disparity,
        labels: argmax_labels(&logits),
    })
}

/// Metrics per sample, rows named by position. Semantic accuracy is left
/// empty for samples without labels.
pub fn evaluate(
    params: &ModelParams,
    samples: &[StereoSample],
    cfg: &EvalConfig,
    pp: bool,
) -> Result<Vec<MetricRow>> {
    let mut rows = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let pred = predict(params, &s.left, pp)?;
        let z_pred = disparity_to_depth(pred.disparity.data(), &s.calib, cfg)?;
        let z_gt = disparity_to_depth(s.gt_disparity.data(), &s.calib, cfg)?;
        let depth = depth_metrics(&z_pred, &z_gt, cfg)?;
        let semantic_accuracy = if s.semantic.iter().any(|&l| l != IGNORE_LABEL) {
            Some(semantic_accuracy(&pred.labels, &s.semantic)?)
        } else {
            None
        };
        rows.push(MetricRow {
            sample: i.to_string(),
            depth,
            semantic_accuracy,
        });
    }
    Ok(rows)
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Writes `prefix_disp.pgm` (16-bit, x256), `prefix_sem.pgm` (labels) and
/// `prefix_preview.pgm` (disparity scaled to 0..255). Returns the paths in
/// that order.
pub fn write_prediction(prefix: &Path, pred: &Prediction) -> Result<[PathBuf; 3]> {
    let s = pred.disparity.shape();
    let (h, w) = (s.height(), s.width());
    let codes = pred
        .disparity
        .data()
        .iter()
        .map(|&d| encode_disparity(d))
        .collect::<Result<Vec<_>>>()?;
    let max = pred.disparity.data().iter().fold(0f32, |m, &d| m.max(d));
    let preview: Vec<u8> = pred
        .disparity
        .data()
        .iter()
        .map(|&d| {
            if max > 0.0 {
                (d / max * 255.0).round() as u8
            } else {
                0
            }
        })
        .collect();
    let paths = [
        with_suffix(prefix, "_disp.pgm"),
        with_suffix(prefix, "_sem.pgm"),
        with_suffix(prefix, "_preview.pgm"),
    ];
    write_pgm16(&paths[0], h, w, &codes)?;
    write_pgm8(&paths[1], h, w, &pred.labels)?;
    write_pgm8(&paths[2], h, w, &preview)?;
    Ok(paths)
}
