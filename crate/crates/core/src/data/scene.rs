//! Procedural rectified stereo scenes with exact disparity and labels.
//!
//! A scene is a stack of fronto-parallel layers: a background plane of
//! class 0 at `d_min` and a few textured objects. Every layer is described
//! in left-image coordinates and has an integer disparity, so the right
//! view is the same stack with each layer shifted left by its disparity
//! and composited far to near. Nearer objects sit lower in the frame and
//! are larger, giving the monocular cues a single-view network can learn.

use super::rng::{mix64, SplitMix64};
use super::{quantize, Calibration, StereoSample};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Classes including the background (class 0).
    pub num_classes: usize,
    /// Background disparity in pixels.
    pub d_min: u32,
    /// Largest object disparity in pixels.
    pub d_max: u32,
    /// Value-noise octaves of every texture.
    pub octaves: u32,
    /// Object height in pixels per pixel of disparity.
    pub object_scale: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            height: 64,
            width: 128,
            min_objects: 1,
            max_objects: 4,
            num_classes: 4,
            d_min: 2,
            d_max: 24,
            octaves: 3,
            object_scale: 1.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ObjectShape {
    Rect,
    Disk,
}

/// Footprint of a class: shape and width relative to height.
fn class_shape(class: usize) -> (ObjectShape, f64) {
    match (class - 1) % 3 {
        0 => (ObjectShape::Rect, 1.6),
        1 => (ObjectShape::Disk, 1.0),
        _ => (ObjectShape::Rect, 0.5),
    }
}

fn palette(class: usize) -> [f64; 3] {
    const BASE: [[f64; 3]; 4] = [
        [0.55, 0.6, 0.7],
        [0.85, 0.25, 0.2],
        [0.25, 0.75, 0.3],
        [0.9, 0.8, 0.25],
    ];
    if class < BASE.len() {
        return BASE[class];
    }
    let h = mix64(class as u64);
    [0, 1, 2].map(|k| 0.2 + 0.7 * ((h >> (16 * k)) & 0xffff) as f64 / 65535.0)
}

impl SceneConfig {
    fn object_dims(&self, class: usize, disparity: u32) -> (usize, usize) {
        let h = ((self.object_scale * disparity as f64).round() as usize).max(3);
        let w = ((h as f64 * class_shape(class).1).round() as usize).max(2);
        (h, w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 8 || self.width < 8 {
            return Err(Error::Config(format!(
                "scene {}x{} too small",
                self.height, self.width
            )));
        }
        if self.num_classes < 2 || self.num_classes >= 255 {
            return Err(Error::Config(format!(
                "num_classes {} outside [2, 255)",
                self.num_classes
            )));
        }
        if self.d_min == 0 || self.d_max <= self.d_min {
            return Err(Error::Config(format!(
                "disparity range [{}, {}] must satisfy 0 < d_min < d_max",
                self.d_min, self.d_max
            )));
        }
        if 4 * self.d_max as usize >= self.width {
            return Err(Error::Config(format!(
                "d_max {} must be below a quarter of the width {}",
                self.d_max, self.width
            )));
        }
        if self.min_objects > self.max_objects {
            return Err(Error::Config("min_objects exceeds max_objects".into()));
        }
        if !(1..=6).contains(&self.octaves) {
            return Err(Error::Config(format!(
                "octaves {} outside [1, 6]",
                self.octaves
            )));
        }
        if !(self.object_scale > 0.0 && self.object_scale.is_finite()) {
            return Err(Error::Config("object_scale must be positive".into()));
        }
        if self.max_objects > 0 {
            for class in 1..self.num_classes.min(4) {
                let (h, w) = self.object_dims(class, self.d_max);
                if h > self.height || w > self.width {
                    return Err(Error::Config(format!(
                        "class {class} object at disparity {} is {w}x{h}, larger than the {}x{} frame",
                        self.d_max, self.width, self.height
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn calibration(&self) -> Calibration {
        Calibration::for_width(self.width)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneObject {
    pub class: usize,
    pub shape: ObjectShape,
    pub disparity: u32,
    /// Top-left corner and size in left-image pixels.
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

impl SceneObject {
    /// Whether the object covers left-image pixel `(y, x)`.
    pub fn covers(&self, y: i64, x: i64) -> bool {
        let (x0, y0) = (self.x as i64, self.y as i64);
        if x < x0 || y < y0 || x >= x0 + self.width as i64 || y >= y0 + self.height as i64 {
            return false;
        }
        match self.shape {
            ObjectShape::Rect => true,
            ObjectShape::Disk => {
                let r = self.width.min(self.height) as f64 / 2.0;
                let cx = x0 as f64 + self.width as f64 / 2.0;
                let cy = y0 as f64 + self.height as f64 / 2.0;
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                dx * dx + dy * dy <= r * r
            }
        }
    }
}

/// How a left-image pixel appears in the right view.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Visibility {
    Visible,
    /// Hidden behind a nearer layer in the right view.
    Occluded,
    /// Projects outside the right image.
    OutOfFrame,
}

#[derive(Clone, Debug)]
pub struct Scene {
    pub sample: StereoSample,
    /// Disparity of the right view, (1, 1, H, W).
    pub right_disparity: Tensor<f32>,
    /// Per left pixel, row-major.
    pub visibility: Vec<Visibility>,
    /// Objects far to near (compositing order).
    pub objects: Vec<SceneObject>,
}

impl Scene {
    pub fn visible_count(&self) -> usize {
        self.visibility
            .iter()
            .filter(|&&v| v == Visibility::Visible)
            .count()
    }
}

/// Multi-octave value noise in `[0, 1]`, defined on the whole plane.
struct Texture {
    seed: u64,
    octaves: u32,
    period: f64,
}

impl Texture {
    fn lattice(&self, octave: u32, ix: i64, iy: i64) -> f64 {
        let h = mix64(
            self.seed
                ^ mix64((ix as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
                ^ mix64((iy as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F) ^ octave as u64),
        );
        (h >> 11) as f64 / (1u64 << 53) as f64
    }

    fn sample(&self, y: f64, x: f64) -> f64 {
        let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
        let (mut total, mut norm, mut amp, mut period) = (0.0, 0.0, 1.0, self.period);
        for o in 0..self.octaves {
            let (fx, fy) = (x / period, y / period);
            let (ix, iy) = (fx.floor() as i64, fy.floor() as i64);
            let (tx, ty) = (smooth(fx - ix as f64), smooth(fy - iy as f64));
            let v00 = self.lattice(o, ix, iy);
            let v10 = self.lattice(o, ix + 1, iy);
            let v01 = self.lattice(o, ix, iy + 1);
            let v11 = self.lattice(o, ix + 1, iy + 1);
            let top = v00 + (v10 - v00) * tx;
            let bottom = v01 + (v11 - v01) * tx;
            total += amp * (top + (bottom - top) * ty);
            norm += amp;
            amp *= 0.5;
            period *= 0.5;
        }
        total / norm
    }
}

struct Layer {
    object: Option<SceneObject>,
    class: usize,
    disparity: u32,
    shade: Texture,
    tint: Texture,
}

impl Layer {
    fn covers(&self, y: i64, x: i64) -> bool {
        self.object.as_ref().is_none_or(|o| o.covers(y, x))
    }

    fn color(&self, y: i64, x: i64) -> [f32; 3] {
        let (fy, fx) = (y as f64 + 0.5, x as f64 + 0.5);
        let n = self.shade.sample(fy, fx);
        let t = self.tint.sample(fy, fx) - 0.5;
        let base = palette(self.class);
        [0, 1, 2].map(|c| {
            let shift = if c == 1 { -t } else { t };
            quantize(base[c] * (0.3 + 0.7 * n) + 0.2 * shift)
        })
    }
}

/// Index of the topmost layer covering left-coordinate pixel `(y, x)` when
/// every layer is shifted by `shift(layer)`.
fn topmost(layers: &[Layer], y: i64, x: i64, shifted: bool) -> usize {
    layers
        .iter()
        .rposition(|l| {
            let lx = if shifted { x + l.disparity as i64 } else { x };
            l.covers(y, lx)
        })
        .expect("background covers every pixel")
}

/// Deterministic in `(cfg, seed)`; `cfg.seed` is not consulted.
pub fn generate_scene(cfg: &SceneConfig, seed: u64) -> Result<Scene> {
    cfg.validate()?;
    let (h, w) = (cfg.height, cfg.width);
    let mut rng = SplitMix64::derive(seed, 0x5CE7E);
    let texture = |rng: &mut SplitMix64, period: f64| Texture {
        seed: rng.next_u64(),
        octaves: cfg.octaves,
        period,
    };

    let mut layers = vec![Layer {
        object: None,
        class: 0,
        disparity: cfg.d_min,
        shade: texture(&mut rng, 32.0),
        tint: texture(&mut rng, 64.0),
    }];

    let count = rng.range_inclusive(cfg.min_objects, cfg.max_objects);
    let horizon = 0.4 * h as f64;
    let span = (cfg.d_max - cfg.d_min) as f64;
    let mut objects = Vec::with_capacity(count);
    for _ in 0..count {
        let class = rng.range_inclusive(1, cfg.num_classes - 1);
        let disparity = rng.range_inclusive(cfg.d_min as usize + 1, cfg.d_max as usize) as u32;
        let (oh, ow) = cfg.object_dims(class, disparity);
        if oh > h || ow > w {
            return Err(Error::invalid(
                "generate_scene",
                format!("object {ow}x{oh} larger than the {w}x{h} frame"),
            ));
        }
        let depth_cue = (disparity - cfg.d_min) as f64 / span;
        let bottom = (horizon + depth_cue * (h as f64 - 1.0 - horizon)).round() as usize;
        let y = bottom.max(oh - 1) + 1 - oh;
        let x = rng.range_inclusive(0, w - ow);
        objects.push(SceneObject {
            class,
            shape: class_shape(class).0,
            disparity,
            x,
            y,
            width: ow,
            height: oh,
        });
    }
    // painter's order: far (small disparity) first, ties by draw order
    objects.sort_by_key(|o| o.disparity);
    for o in &objects {
        layers.push(Layer {
            object: Some(o.clone()),
            class: o.class,
            disparity: o.disparity,
            shade: texture(&mut rng, 16.0),
            tint: texture(&mut rng, 32.0),
        });
    }

    let shape = Shape::new(1, 3, h, w);
    let plane = h * w;
    let mut left = Tensor::zeros(shape);
    let mut right = Tensor::zeros(shape);
    let mut disp_l = Tensor::zeros(Shape::new(1, 1, h, w));
    let mut disp_r = Tensor::zeros(Shape::new(1, 1, h, w));
    let mut semantic = vec![0u8; plane];
    let mut visibility = vec![Visibility::Visible; plane];

    for y in 0..h {
        for x in 0..w {
            let (yi, xi) = (y as i64, x as i64);
            let p = y * w + x;

            let li = topmost(&layers, yi, xi, false);
            let layer = &layers[li];
            let c = layer.color(yi, xi);
            for (k, v) in c.into_iter().enumerate() {
                left.data_mut()[k * plane + p] = v;
            }
            disp_l.data_mut()[p] = layer.disparity as f32;
            semantic[p] = layer.class as u8;
            let xr = xi - layer.disparity as i64;
            visibility[p] = if xr < 0 {
                Visibility::OutOfFrame
            } else if topmost(&layers, yi, xr, true) != li {
                Visibility::Occluded
            } else {
                Visibility::Visible
            };

            let ri = topmost(&layers, yi, xi, true);
            let rl = &layers[ri];
            let c = rl.color(yi, xi + rl.disparity as i64);
            for (k, v) in c.into_iter().enumerate() {
                right.data_mut()[k * plane + p] = v;
            }
            disp_r.data_mut()[p] = rl.disparity as f32;
        }
    }

    Ok(Scene {
        sample: StereoSample {
            left,
            right,
            semantic,
            gt_disparity: disp_l,
            calib: cfg.calibration(),
        },
        right_disparity: disp_r,
        visibility,
        objects,
    })
}
