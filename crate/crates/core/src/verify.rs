//! Finite-difference gradient checks of every differentiable operator, every
//! loss term and the full training objective, run at 64-bit precision.
//!
//! Fixtures are seeded and keep inputs away from non-differentiable points
//! (zero for `abs`, clamp bounds, integer sample offsets for warping), so a
//! failure always means a wrong backward pass.

use crate::data::SplitMix64;
use crate::error::Result;
use crate::image_ops::{self, GradientAxis, SsimConfig};
use crate::losses::{
    self, LossInputs, LossMode, LossWeights, SemanticTarget, Semantics, IGNORE_LABEL,
};
use crate::network::{init_params, DisparityPair, ModelConfig};
use crate::tensor::{
    grad_check, Axis, GradCheckOptions, GradCheckReport, Graph, ReduceAxes, Shape, Tensor,
    UpsampleMode, Var, WarpDirection,
};
use crate::train::{batch_loss, Batch};

/// Tolerance for single operators.
pub const PRIMITIVE_TOLERANCE: f64 = 1e-4;
/// Tolerance for loss terms and the composite objective.
pub const LOSS_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradCase {
    pub name: String,
    pub report: GradCheckReport,
}

impl GradCase {
    pub fn passed(&self) -> bool {
        self.report.passed
    }
}

type Fun = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

struct Fixtures {
    rng: SplitMix64,
}

impl Fixtures {
    fn new(seed: u64) -> Self {
        Fixtures {
            rng: SplitMix64::new(seed),
        }
    }

    fn uniform(&mut self, shape: Shape, lo: f64, hi: f64) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| self.rng.uniform(lo, hi))
    }

    /// Magnitudes in [lo, hi] with random sign.
    fn signed(&mut self, shape: Shape, lo: f64, hi: f64) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| {
            let m = self.rng.uniform(lo, hi);
            if self.rng.chance(0.5) {
                m
            } else {
                -m
            }
        })
    }

    /// Values whose fractional part stays in [0.1, 0.9].
    fn off_grid(&mut self, shape: Shape, max: usize) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| {
            self.rng.range_inclusive(0, max.saturating_sub(1)) as f64 + self.rng.uniform(0.1, 0.9)
        })
    }

    /// Piecewise-constant labels: vertical bands with a horizontal split, a
    /// few ignored pixels.
    fn labels(&mut self, b: usize, h: usize, w: usize, classes: usize) -> Vec<u8> {
        let mut out = Vec::with_capacity(b * h * w);
        for _ in 0..b {
            let cut_x = self.rng.range_inclusive(1, w - 2);
            let cut_y = self.rng.range_inclusive(1, h - 2);
            let base = self.rng.range_inclusive(0, classes - 1);
            for y in 0..h {
                for x in 0..w {
                    let mut c = base;
                    if x >= cut_x {
                        c += 1;
                    }
                    if y >= cut_y {
                        c += 1;
                    }
                    out.push(if self.rng.chance(0.03) {
                        IGNORE_LABEL
                    } else {
                        (c % classes) as u8
                    });
                }
            }
        }
        out
    }
}

/// `sum(out * w)` with fixed random `w`, so every output element carries a
/// distinct weight.
fn weighted(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let w = Fixtures::new(seed).uniform(g.shape(out), -1.0, 1.0);
    let w = g.constant(w);
    let p = g.mul(out, w)?;
    g.sum(p)
}

fn run(name: &str, f: Fun, inputs: &[Tensor<f64>], tolerance: f64) -> Result<GradCase> {
    let opts = GradCheckOptions::with_tolerance(tolerance);
    Ok(GradCase {
        name: name.to_string(),
        report: grad_check(f, inputs, &opts)?,
    })
}

fn unary(
    name: &str,
    x: Tensor<f64>,
    op: fn(&mut Graph<f64>, Var) -> Result<Var>,
) -> Result<GradCase> {
    run(
        name,
        Box::new(move |g, v| {
            let y = op(g, v[0])?;
            weighted(g, y, 11)
        }),
        &[x],
        PRIMITIVE_TOLERANCE,
    )
}

fn binary(
    name: &str,
    a: Tensor<f64>,
    b: Tensor<f64>,
    op: fn(&mut Graph<f64>, Var, Var) -> Result<Var>,
) -> Result<GradCase> {
    run(
        name,
        Box::new(move |g, v| {
            let y = op(g, v[0], v[1])?;
            weighted(g, y, 12)
        }),
        &[a, b],
        PRIMITIVE_TOLERANCE,
    )
}

/// Every graph operator and image operator on 2x3x8x8 inputs (2x3x16x32
/// where a kernel path needs a wider plane).
pub fn primitive_checks() -> Result<Vec<GradCase>> {
    let mut fx = Fixtures::new(0x5eed_0001);
    let s = Shape::new(2, 3, 8, 8);
    let wide = Shape::new(2, 3, 16, 32);
    let mut out = Vec::new();

    let (a, b) = (fx.uniform(s, -1.0, 1.0), fx.uniform(s, -1.0, 1.0));
    out.push(binary("add", a.clone(), b.clone(), |g, x, y| g.add(x, y))?);
    out.push(binary("sub", a.clone(), b.clone(), |g, x, y| g.sub(x, y))?);
    out.push(binary("mul", a.clone(), b, |g, x, y| g.mul(x, y))?);
    let pos = fx.uniform(s, 0.5, 1.5);
    out.push(binary("div", a.clone(), pos.clone(), |g, x, y| {
        g.div(x, y)
    })?);

    out.push(unary("neg", a.clone(), |g, x| g.neg(x))?);
    out.push(unary("exp", a.clone(), |g, x| g.exp(x))?);
    out.push(unary("log", pos, |g, x| g.log(x))?);
    out.push(unary("abs", fx.signed(s, 0.1, 1.0), |g, x| g.abs(x))?);
    out.push(unary("sigmoid", fx.uniform(s, -3.0, 3.0), |g, x| {
        g.sigmoid(x)
    })?);
    out.push(unary("elu", fx.signed(s, 0.05, 2.0), |g, x| g.elu(x))?);
    out.push(unary("scalar_mul", a.clone(), |g, x| {
        g.scalar_mul(x, -1.7)
    })?);
    out.push(unary("scalar_add", a.clone(), |g, x| g.scalar_add(x, 0.3))?);
    // Inside, below and above [-0.5, 0.5], at least 0.05 from either bound.
    let c = Tensor::from_fn(s, |_| {
        let band = fx.rng.range_inclusive(0, 2);
        match band {
            0 => fx.rng.uniform(-1.0, -0.55),
            1 => fx.rng.uniform(-0.45, 0.45),
            _ => fx.rng.uniform(0.55, 1.0),
        }
    });
    out.push(unary("clamp", c, |g, x| g.clamp(x, -0.5, 0.5))?);

    for (name, shape, out_ch, k, stride) in [
        ("conv2d k3 s1", s, 4, 3, 1),
        ("conv2d k3 s2", s, 4, 3, 2),
        ("conv2d k1 s1", s, 5, 1, 1),
        ("conv2d k5 s2", s, 2, 5, 2),
        ("conv2d k3 s1 wide", wide, 4, 3, 1),
        ("conv2d k3 s2 wide", wide, 4, 3, 2),
    ] {
        let x = fx.uniform(shape, -1.0, 1.0);
        let w = fx.uniform(Shape::new(out_ch, 3, k, k), -0.5, 0.5);
        let bias = fx.uniform(Shape::new(1, out_ch, 1, 1), -0.5, 0.5);
        out.push(run(
            name,
            Box::new(move |g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), stride, k / 2)?;
                weighted(g, y, 13)
            }),
            &[x, w, bias],
            PRIMITIVE_TOLERANCE,
        )?);
    }

    out.push(unary("upsample nearest", a.clone(), |g, x| {
        g.upsample(x, UpsampleMode::Nearest)
    })?);
    out.push(unary("upsample bilinear", a.clone(), |g, x| {
        g.upsample(x, UpsampleMode::Bilinear)
    })?);
    out.push(unary("avg_pool k3 s1", a.clone(), |g, x| {
        g.avg_pool(x, 3, 1)
    })?);
    out.push(unary("avg_pool k2 s2", a.clone(), |g, x| {
        g.avg_pool(x, 2, 2)
    })?);
    out.push(unary("sum", a.clone(), |g, x| {
        let y = g.exp(x)?;
        g.sum(y)
    })?);
    out.push(unary("mean", a.clone(), |g, x| {
        let y = g.exp(x)?;
        g.mean(y)
    })?);
    out.push(unary("sum_axes spatial", a.clone(), |g, x| {
        g.sum_axes(x, ReduceAxes::Spatial)
    })?);
    out.push(unary("mean_axes spatial", a.clone(), |g, x| {
        g.mean_axes(x, ReduceAxes::Spatial)
    })?);
    out.push(unary("channel_mean", a.clone(), |g, x| g.channel_mean(x))?);
    out.push(unary("diff width", a.clone(), |g, x| {
        g.diff(x, Axis::Width)
    })?);
    out.push(unary("diff height", a.clone(), |g, x| {
        g.diff(x, Axis::Height)
    })?);
    out.push(unary("narrow channel", a.clone(), |g, x| {
        g.narrow(x, Axis::Channel, 1, 2)
    })?);
    out.push(unary("narrow width", a.clone(), |g, x| {
        g.narrow(x, Axis::Width, 2, 5)
    })?);
    let other = fx.uniform(Shape::new(2, 2, 8, 8), -1.0, 1.0);
    out.push(binary("concat", a.clone(), other, |g, x, y| {
        g.concat(&[x, y])
    })?);

    for (name, dir) in [
        ("warp left-from-right", WarpDirection::LeftFromRight),
        ("warp right-from-left", WarpDirection::RightFromLeft),
    ] {
        let src = fx.uniform(s, -1.0, 1.0);
        let disp = fx.off_grid(Shape::new(2, 1, 8, 8), 4);
        out.push(run(
            name,
            Box::new(move |g, v| {
                let y = g.warp_horizontal(v[0], v[1], dir)?;
                weighted(g, y, 14)
            }),
            &[src, disp],
            PRIMITIVE_TOLERANCE,
        )?);
    }

    let logits = fx.uniform(s, -2.0, 2.0);
    let labels = fx.labels(2, 8, 8, 3);
    out.push(run(
        "cross_entropy",
        Box::new(move |g, v| g.cross_entropy(v[0], &labels, IGNORE_LABEL)),
        &[logits],
        PRIMITIVE_TOLERANCE,
    )?);

    out.push(unary("spatial_gradient x", a.clone(), |g, x| {
        image_ops::spatial_gradient(g, x, GradientAxis::X)
    })?);
    out.push(unary("spatial_gradient y", a.clone(), |g, x| {
        image_ops::spatial_gradient(g, x, GradientAxis::Y)
    })?);
    let near = Tensor::from_fn(s, |i| a.at(i) + fx.rng.uniform(-0.3, 0.3));
    out.push(binary(
        "ssim",
        fx.uniform(s, 0.0, 1.0),
        near.map(|v| v * 0.5 + 0.5),
        |g, x, y| image_ops::ssim(g, x, y, &SsimConfig::default()),
    )?);
    Ok(out)
}

const LOSS_H: usize = 8;
const LOSS_W: usize = 16;
const LOSS_CLASSES: usize = 2;
const NET_H: usize = 16;
const NET_W: usize = 32;

/// Each loss term and the weighted objective on 2-sample, 2-class 8x16
/// fixtures.
pub fn loss_checks() -> Result<Vec<GradCase>> {
    let mut fx = Fixtures::new(0x5eed_0002);
    let img = Shape::new(2, 3, LOSS_H, LOSS_W);
    let map = Shape::new(2, 1, LOSS_H, LOSS_W);
    let ssim = SsimConfig::default();
    let weights = LossWeights::default();
    let mut out = Vec::new();

    let image = fx.uniform(img, 0.0, 1.0);
    let warped = fx.uniform(img, 0.0, 1.0);
    out.push(run(
        "appearance",
        Box::new(move |g, v| losses::appearance_loss(g, v[0], v[1], 0.85, &ssim)),
        &[image.clone(), warped],
        LOSS_TOLERANCE,
    )?);

    let disp = fx.uniform(map, 0.5, 6.0);
    out.push(run(
        "smoothness",
        Box::new(|g, v| losses::smoothness_loss(g, v[0], v[1])),
        &[disp, image],
        LOSS_TOLERANCE,
    )?);

    for (name, dir) in [
        ("lr consistency left", WarpDirection::LeftFromRight),
        ("lr consistency right", WarpDirection::RightFromLeft),
    ] {
        let reference = fx.off_grid(map, 6);
        let other = fx.uniform(map, 0.0, 6.0);
        out.push(run(
            name,
            Box::new(move |g, v| losses::lr_consistency_loss(g, v[0], v[1], dir)),
            &[reference, other],
            LOSS_TOLERANCE,
        )?);
    }

    // Two pyramid levels: disparity pairs, then left and right images.
    let mut depth_inputs = Vec::new();
    for s in 0..2 {
        let m = Shape::new(2, 1, LOSS_H >> s, LOSS_W >> s);
        depth_inputs.push(fx.off_grid(m, 4 >> s));
        depth_inputs.push(fx.off_grid(m, 4 >> s));
    }
    for s in 0..2 {
        let i = Shape::new(2, 3, LOSS_H >> s, LOSS_W >> s);
        depth_inputs.push(fx.uniform(i, 0.0, 1.0));
    }
    for s in 0..2 {
        let i = Shape::new(2, 3, LOSS_H >> s, LOSS_W >> s);
        depth_inputs.push(fx.uniform(i, 0.0, 1.0));
    }
    let w = weights.clone();
    out.push(run(
        "depth",
        Box::new(move |g, v| {
            let pyramid = vec![
                DisparityPair {
                    left: v[0],
                    right: v[1],
                },
                DisparityPair {
                    left: v[2],
                    right: v[3],
                },
            ];
            Ok(losses::depth_loss(g, &pyramid, &v[4..6], &v[6..8], &w, &ssim)?.0)
        }),
        &depth_inputs,
        LOSS_TOLERANCE,
    )?);

    let target = SemanticTarget::new(
        2,
        LOSS_H,
        LOSS_W,
        fx.labels(2, LOSS_H, LOSS_W, LOSS_CLASSES),
        LOSS_CLASSES,
    )?;
    let logits = fx.uniform(Shape::new(2, LOSS_CLASSES, LOSS_H, LOSS_W), -2.0, 2.0);
    let t = target.clone();
    out.push(run(
        "semantic",
        Box::new(move |g, v| losses::semantic_loss(g, v[0], &t)),
        std::slice::from_ref(&logits),
        LOSS_TOLERANCE,
    )?);

    let disp = fx.uniform(map, 0.5, 6.0);
    let t = target.clone();
    out.push(run(
        "cdd",
        Box::new(move |g, v| losses::cdd_loss(g, v[0], &t)),
        &[disp],
        LOSS_TOLERANCE,
    )?);

    for mode in LossMode::ALL {
        let mut inputs = depth_inputs.clone();
        inputs.push(logits.clone());
        let (t, w) = (target.clone(), weights.clone());
        out.push(run(
            &format!("total {mode}"),
            Box::new(move |g, v| {
                let pyramid = vec![
                    DisparityPair {
                        left: v[0],
                        right: v[1],
                    },
                    DisparityPair {
                        left: v[2],
                        right: v[3],
                    },
                ];
                let inputs = LossInputs {
                    pyramid: &pyramid,
                    left: &v[4..6],
                    right: &v[6..8],
                    logits: Some(v[8]),
                    semantics: Semantics::Labels(&t),
                };
                Ok(losses::total_loss(g, &inputs, mode, &w, &ssim)?.0)
            }),
            &inputs,
            LOSS_TOLERANCE,
        )?);
    }
    Ok(out)
}

/// The training objective with respect to every parameter of a two-level
/// network on a 2-sample 16x32 batch.
pub fn composite_check(mode: LossMode) -> Result<GradCase> {
    let cfg = ModelConfig {
        encoder_channels: vec![4, 8],
        num_classes: LOSS_CLASSES,
        d_max_fraction: 0.3,
        height: NET_H,
        width: NET_W,
    };
    cfg.validate()?;
    let params = init_params(&cfg, 7)?;
    let mut fx = Fixtures::new(0x5eed_0003);
    let img = Shape::new(2, 3, NET_H, NET_W);
    let batch = Batch {
        left: fx.uniform(img, 0.0, 1.0).cast(),
        right: fx.uniform(img, 0.0, 1.0).cast(),
        labels: fx.labels(2, NET_H, NET_W, LOSS_CLASSES),
        flipped: vec![false, false],
    };
    let inputs: Vec<Tensor<f64>> = params.tensors().iter().map(|t| t.cast()).collect();
    let (weights, ssim) = (LossWeights::default(), SsimConfig::default());
    run(
        &format!("objective {mode} over all parameters"),
        Box::new(move |g, v| {
            let vars: Vec<Option<Var>> = v.iter().copied().map(Some).collect();
            Ok(batch_loss(g, &cfg, &vars, &batch, mode, &weights, &ssim)?.0)
        }),
        &inputs,
        LOSS_TOLERANCE,
    )
}

/// Primitive, loss and composite checks in that order.
pub fn run_all() -> Result<Vec<GradCase>> {
    let mut out = primitive_checks()?;
    out.extend(loss_checks()?);
    out.push(composite_check(LossMode::DSCdd)?);
    Ok(out)
}
