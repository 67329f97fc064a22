//! Synthetic stereo data: seeded generation, file I/O, manifests and
//! training-time augmentation.

mod augment;
mod io;
mod manifest;
mod rng;
mod scene;

pub use augment::{augment, augment_with, AugmentConfig, AugmentParams, Augmented};
pub use io::{
    decode_disparity, encode_disparity, load_sample, read_calibration, read_pgm16, read_pgm8,
    read_ppm, sample_paths, save_sample, write_calibration, write_pgm16, write_pgm8, write_ppm,
    SamplePaths,
};
pub use manifest::{generate_dataset, load_manifest, write_manifest, Manifest};
pub use rng::{mix64, SplitMix64};
pub use scene::{generate_scene, ObjectShape, Scene, SceneConfig, SceneObject, Visibility};

use crate::error::{Error, Result};
use crate::losses::{SemanticTarget, IGNORE_LABEL};
use crate::tensor::{Shape, Tensor};

/// Rounds to the nearest 8-bit level and returns it as a float in `[0, 1]`.
pub fn quantize(v: f64) -> f32 {
    to_u8(v) as f32 / 255.0
}

pub(crate) fn to_u8(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Calibration {
    pub focal_px: f64,
    pub baseline_m: f64,
    pub width_px: usize,
}

impl Calibration {
    /// Camera with a driving-rig baseline and a field of view matching a
    /// wide automotive sensor at the given width.
    pub fn for_width(width: usize) -> Self {
        Calibration {
            focal_px: 0.58 * width as f64,
            baseline_m: 0.54,
            width_px: width,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.focal_px > 0.0 && self.baseline_m > 0.0 && self.width_px > 0)
            || !self.focal_px.is_finite()
            || !self.baseline_m.is_finite()
        {
            return Err(Error::invalid(
                "calibration",
                format!("non-positive calibration {self:?}"),
            ));
        }
        Ok(())
    }

    /// Focal length after resampling the image to `width` pixels.
    pub fn rescaled(&self, width: usize) -> Calibration {
        Calibration {
            focal_px: self.focal_px * width as f64 / self.width_px as f64,
            baseline_m: self.baseline_m,
            width_px: width,
        }
    }
}

/// One rectified stereo pair with left-view ground truth.
///
/// Images are (1, 3, H, W) in `[0, 1]`; `gt_disparity` is (1, 1, H, W) in
/// pixels with 0 marking invalid pixels; `semantic` holds H*W label ids,
/// row-major, with [`IGNORE_LABEL`] excluded from supervision.
#[derive(Clone, Debug, PartialEq)]
pub struct StereoSample {
    pub left: Tensor<f32>,
    pub right: Tensor<f32>,
    pub semantic: Vec<u8>,
    pub gt_disparity: Tensor<f32>,
    pub calib: Calibration,
}

impl StereoSample {
    pub fn height(&self) -> usize {
        self.left.shape().height()
    }

    pub fn width(&self) -> usize {
        self.left.shape().width()
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = (self.height(), self.width());
        let rgb = Shape::new(1, 3, h, w);
        if self.left.shape() != rgb || self.right.shape() != rgb {
            return Err(Error::ShapeMismatch {
                op: "stereo sample",
                lhs: self.left.shape(),
                rhs: self.right.shape(),
            });
        }
        if self.gt_disparity.shape() != Shape::new(1, 1, h, w) || self.semantic.len() != h * w {
            return Err(Error::invalid(
                "stereo sample",
                format!("ground truth does not match {w}x{h} images"),
            ));
        }
        if self
            .gt_disparity
            .data()
            .iter()
            .any(|&d| !(d >= 0.0 && d.is_finite()))
        {
            return Err(Error::invalid(
                "stereo sample",
                "negative or non-finite disparity",
            ));
        }
        self.calib.validate()
    }

    /// Whether any pixel carries a usable label.
    pub fn has_labels(&self) -> bool {
        self.semantic.iter().any(|&l| l != IGNORE_LABEL)
    }

    pub fn semantic_target(&self, num_classes: usize) -> Result<SemanticTarget> {
        SemanticTarget::new(
            1,
            self.height(),
            self.width(),
            self.semantic.clone(),
            num_classes,
        )
    }
}
