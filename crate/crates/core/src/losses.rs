//! Training objective: stereo image-reconstruction depth loss over a
//! disparity pyramid, pixel-wise semantic cross-entropy, and the
//! cross-domain discontinuity term tying disparity edges to label edges.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::image_ops::{self, GradientAxis, SsimConfig};
use crate::network::DisparityPyramid;
use crate::tensor::{Axis, Float, Graph, Shape, Tensor, Var, WarpDirection};

/// Label id excluded from the semantic and discontinuity terms.
pub const IGNORE_LABEL: u8 = 255;

/// Floor applied to the disparity in the denominator of the
/// discontinuity term.
pub const CDD_EPSILON: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha_d: f64,
    pub alpha_s: f64,
    pub alpha_cdd: f64,
    pub beta_ap: f64,
    /// Smoothness weight at full resolution; divided by the down-sampling
    /// factor at coarser scales.
    pub beta_ds: f64,
    pub beta_lr: f64,
    /// SSIM share of the appearance term.
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha_d: 1.0,
            alpha_s: 0.1,
            alpha_cdd: 0.1,
            beta_ap: 1.0,
            beta_ds: 1.0,
            beta_lr: 1.0,
            gamma: 0.85,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.alpha_d,
            self.alpha_s,
            self.alpha_cdd,
            self.beta_ap,
            self.beta_ds,
            self.beta_lr,
            self.gamma,
        ];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config(
                "loss weights must be finite and non-negative".into(),
            ));
        }
        if self.gamma > 1.0 {
            return Err(Error::Config(format!(
                "gamma {} outside [0, 1]",
                self.gamma
            )));
        }
        Ok(())
    }

    /// Smoothness weight at pyramid level `scale` (down-sampling factor 2^scale).
    pub fn beta_ds_at(&self, scale: usize) -> f64 {
        self.beta_ds / (1u64 << scale) as f64
    }
}

/// Which terms of the total loss are active (the four ablation settings).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LossMode {
    D,
    DS,
    DSCdd,
    DCdd,
}

impl LossMode {
    pub const ALL: [LossMode; 4] = [LossMode::D, LossMode::DS, LossMode::DSCdd, LossMode::DCdd];

    pub fn uses_semantic(self) -> bool {
        matches!(self, LossMode::DS | LossMode::DSCdd)
    }

    pub fn uses_cdd(self) -> bool {
        matches!(self, LossMode::DSCdd | LossMode::DCdd)
    }

    pub fn needs_labels(self) -> bool {
        self.uses_semantic() || self.uses_cdd()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LossMode::D => "d",
            LossMode::DS => "d+s",
            LossMode::DSCdd => "d+s+cdd",
            LossMode::DCdd => "d+cdd",
        }
    }
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "d" => Ok(LossMode::D),
            "d+s" => Ok(LossMode::DS),
            "d+s+cdd" => Ok(LossMode::DSCdd),
            "d+cdd" => Ok(LossMode::DCdd),
            other => Err(Error::Config(format!(
                "unknown loss mode '{other}' (expected d, d+s, d+s+cdd or d+cdd)"
            ))),
        }
    }
}

/// Hard per-pixel class labels for a batch, laid out (batch, height, width).
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticTarget {
    batch: usize,
    height: usize,
    width: usize,
    labels: Vec<u8>,
    num_classes: usize,
}

impl SemanticTarget {
    pub fn new(
        batch: usize,
        height: usize,
        width: usize,
        labels: Vec<u8>,
        num_classes: usize,
    ) -> Result<Self> {
        if num_classes < 2 || num_classes > IGNORE_LABEL as usize {
            return Err(Error::Config(format!(
                "num_classes {num_classes} outside [2, 255)"
            )));
        }
        if labels.len() != batch * height * width {
            return Err(Error::invalid(
                "semantic target",
                format!("{} labels for {batch}x{height}x{width}", labels.len()),
            ));
        }
        if let Some(bad) = labels
            .iter()
            .find(|&&l| l != IGNORE_LABEL && l as usize >= num_classes)
        {
            return Err(Error::invalid(
                "semantic target",
                format!("label {bad} >= num_classes {num_classes}"),
            ));
        }
        Ok(SemanticTarget {
            batch,
            height,
            width,
            labels,
            num_classes,
        })
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.batch, self.height, self.width)
    }

    pub fn label(&self, b: usize, y: usize, x: usize) -> u8 {
        self.labels[(b * self.height + y) * self.width + x]
    }

    pub fn valid_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l != IGNORE_LABEL).count()
    }

    fn check_spatial(&self, op: &'static str, s: Shape) -> Result<()> {
        if (s.batch(), s.height(), s.width()) != (self.batch, self.height, self.width) {
            return Err(Error::ShapeMismatch {
                op,
                lhs: s,
                rhs: Shape::new(self.batch, 1, self.height, self.width),
            });
        }
        Ok(())
    }

    /// Indicator of a label change between neighbours along `axis`; pairs
    /// touching an ignored pixel count as no change.
    pub fn boundary_mask<T: Float>(&self, axis: GradientAxis) -> Tensor<T> {
        let (dy, dx) = match axis {
            GradientAxis::X => (0, 1),
            GradientAxis::Y => (1, 0),
        };
        let shape = Shape::new(self.batch, 1, self.height - dy, self.width - dx);
        Tensor::from_fn(shape, |[b, _, y, x]| {
            let p = self.label(b, y, x);
            let q = self.label(b, y + dy, x + dx);
            if p != q && p != IGNORE_LABEL && q != IGNORE_LABEL {
                T::one()
            } else {
                T::zero()
            }
        })
    }
}

/// Availability of semantic supervision for a batch.
#[derive(Clone, Copy, Debug)]
pub enum Semantics<'a> {
    Labels(&'a SemanticTarget),
    /// Every sample was mirrored and view-swapped, so its labels do not
    /// describe the reference image.
    Flipped,
    Unavailable,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScaleTerms {
    pub appearance: f64,
    pub smoothness: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub depth: f64,
    pub semantic: f64,
    pub cdd: f64,
    /// Weighted contributions per pyramid level, both views summed.
    pub scales: Vec<ScaleTerms>,
}

/// Image-reconstruction error mixing SSIM dissimilarity and L1:
/// `gamma * mean((1 - SSIM) / 2) + (1 - gamma) * mean(|I - I~|)`.
///
/// The SSIM map covers the unpadded interior, so each part is averaged over
/// its own support.
pub fn appearance_loss<T: Float>(
    g: &mut Graph<T>,
    image: Var,
    warped: Var,
    gamma: f64,
    ssim_cfg: &SsimConfig,
) -> Result<Var> {
    let s = image_ops::ssim(g, image, warped, ssim_cfg)?;
    let dissim = g.neg(s)?;
    let dissim = g.scalar_add(dissim, 1.0)?;
    let dissim = g.scalar_mul(dissim, 0.5)?;
    let ssim_term = g.mean(dissim)?;

    let diff = g.sub(image, warped)?;
    let l1 = g.abs(diff)?;
    let l1 = g.mean(l1)?;

    let a = g.scalar_mul(ssim_term, gamma)?;
    let b = g.scalar_mul(l1, 1.0 - gamma)?;
    g.add(a, b)
}

fn edge_aware_axis<T: Float>(
    g: &mut Graph<T>,
    disp: Var,
    image: Var,
    axis: GradientAxis,
) -> Result<Var> {
    let dd = image_ops::spatial_gradient(g, disp, axis)?;
    let dd = g.abs(dd)?;
    let di = image_ops::spatial_gradient(g, image, axis)?;
    let di = g.abs(di)?;
    let di = g.channel_mean(di)?;
    let w = g.neg(di)?;
    let w = g.exp(w)?;
    let t = g.mul(dd, w)?;
    g.mean(t)
}

/// Edge-aware disparity smoothness: disparity gradients weighted by
/// `exp(-mean_c |dI|)`. Each axis is averaged over its own valid positions.
pub fn smoothness_loss<T: Float>(g: &mut Graph<T>, disp: Var, image: Var) -> Result<Var> {
    let (sd, si) = (g.shape(disp), g.shape(image));
    if sd.channels() != 1
        || (sd.batch(), sd.height(), sd.width()) != (si.batch(), si.height(), si.width())
    {
        return Err(Error::ShapeMismatch {
            op: "smoothness_loss",
            lhs: sd,
            rhs: si,
        });
    }
    let x = edge_aware_axis(g, disp, image, GradientAxis::X)?;
    let y = edge_aware_axis(g, disp, image, GradientAxis::Y)?;
    g.add(x, y)
}

/// Mean absolute difference between `reference` and `other` sampled at the
/// location `reference` points to. `direction` is the warp that rebuilds the
/// reference view: left-from-right for the left map, right-from-left for
/// the right map.
pub fn lr_consistency_loss<T: Float>(
    g: &mut Graph<T>,
    reference: Var,
    other: Var,
    direction: WarpDirection,
) -> Result<Var> {
    let (sa, sb) = (g.shape(reference), g.shape(other));
    if sa != sb || sa.channels() != 1 {
        return Err(Error::ShapeMismatch {
            op: "lr_consistency_loss",
            lhs: sa,
            rhs: sb,
        });
    }
    let projected = g.warp_horizontal(other, reference, direction)?;
    let diff = g.sub(reference, projected)?;
    let diff = g.abs(diff)?;
    g.mean(diff)
}

/// Unsupervised stereo loss summed over pyramid levels. `left` and `right`
/// hold the image pair resampled to each level.
///
/// Smoothness and left-right terms are measured on disparity expressed as
/// a fraction of the level's width, so their magnitude does not grow with
/// resolution.
pub fn depth_loss<T: Float>(
    g: &mut Graph<T>,
    pyramid: &DisparityPyramid,
    left: &[Var],
    right: &[Var],
    w: &LossWeights,
    ssim_cfg: &SsimConfig,
) -> Result<(Var, Vec<ScaleTerms>)> {
    let n = pyramid.len();
    if n == 0 || left.len() != n || right.len() != n {
        return Err(Error::invalid(
            "depth_loss",
            format!(
                "{n} disparity scales vs {} left / {} right image scales",
                left.len(),
                right.len()
            ),
        ));
    }
    let mut total: Option<Var> = None;
    let mut terms = Vec::with_capacity(n);
    for (s, pair) in pyramid.iter().enumerate() {
        let (il, ir) = (left[s], right[s]);
        let sd = g.shape(pair.left);
        if g.shape(il).width() != sd.width() || g.shape(ir).height() != sd.height() {
            return Err(Error::ShapeMismatch {
                op: "depth_loss",
                lhs: sd,
                rhs: g.shape(il),
            });
        }
        let unit = 1.0 / sd.width() as f64;

        let rec_l = g.warp_horizontal(ir, pair.left, WarpDirection::LeftFromRight)?;
        let rec_r = g.warp_horizontal(il, pair.right, WarpDirection::RightFromLeft)?;
        let ap_l = appearance_loss(g, il, rec_l, w.gamma, ssim_cfg)?;
        let ap_r = appearance_loss(g, ir, rec_r, w.gamma, ssim_cfg)?;
        let ap = g.add(ap_l, ap_r)?;
        let ap = g.scalar_mul(ap, w.beta_ap)?;

        let ds_l = smoothness_loss(g, pair.left, il)?;
        let ds_r = smoothness_loss(g, pair.right, ir)?;
        let ds = g.add(ds_l, ds_r)?;
        let ds = g.scalar_mul(ds, w.beta_ds_at(s) * unit)?;

        let lr_l = lr_consistency_loss(g, pair.left, pair.right, WarpDirection::LeftFromRight)?;
        let lr_r = lr_consistency_loss(g, pair.right, pair.left, WarpDirection::RightFromLeft)?;
        let lr = g.add(lr_l, lr_r)?;
        let lr = g.scalar_mul(lr, w.beta_lr * unit)?;

        terms.push(ScaleTerms {
            appearance: g.value(ap).item().as_f64(),
            smoothness: g.value(ds).item().as_f64(),
            lr: g.value(lr).item().as_f64(),
        });
        let level = g.add(ap, ds)?;
        let level = g.add(level, lr)?;
        total = Some(match total {
            Some(t) => g.add(t, level)?,
            None => level,
        });
    }
    Ok((total.expect("at least one scale"), terms))
}

/// Mean softmax cross-entropy over non-ignored pixels, at full resolution.
pub fn semantic_loss<T: Float>(
    g: &mut Graph<T>,
    logits: Var,
    target: &SemanticTarget,
) -> Result<Var> {
    let s = g.shape(logits);
    target.check_spatial("semantic_loss", s)?;
    if s.channels() != target.num_classes {
        return Err(Error::invalid(
            "semantic_loss",
            format!(
                "{} logit channels for {} classes",
                s.channels(),
                target.num_classes
            ),
        ));
    }
    g.cross_entropy(logits, &target.labels, IGNORE_LABEL)
}

fn cdd_axis<T: Float>(
    g: &mut Graph<T>,
    disp: Var,
    target: &SemanticTarget,
    axis: GradientAxis,
) -> Result<Var> {
    let s = g.shape(disp);
    let dd = image_ops::spatial_gradient(g, disp, axis)?;
    let base = match axis {
        GradientAxis::X => g.narrow(disp, Axis::Width, 0, s.width() - 1)?,
        GradientAxis::Y => g.narrow(disp, Axis::Height, 0, s.height() - 1)?,
    };
    let base = g.clamp(base, CDD_EPSILON, f64::INFINITY)?;
    let rel = g.div(dd, base)?;
    let rel = g.abs(rel)?;
    let rel = g.neg(rel)?;
    let e = g.exp(rel)?;
    let mask = g.constant(target.boundary_mask::<T>(axis));
    let t = g.mul(e, mask)?;
    g.mean(t)
}

/// Cross-domain discontinuity: `exp(-|d d / d|)` summed where the ground
/// truth label changes between neighbours, so the loss is lowest when the
/// predicted disparity has a large relative jump at every label boundary.
/// The left element of each pair supplies the denominator.
pub fn cdd_loss<T: Float>(g: &mut Graph<T>, disp: Var, target: &SemanticTarget) -> Result<Var> {
    let s = g.shape(disp);
    if s.channels() != 1 {
        return Err(Error::invalid(
            "cdd_loss",
            format!("disparity must be single-channel, got {s}"),
        ));
    }
    target.check_spatial("cdd_loss", s)?;
    let x = cdd_axis(g, disp, target, GradientAxis::X)?;
    let y = cdd_axis(g, disp, target, GradientAxis::Y)?;
    g.add(x, y)
}

/// Everything the total loss reads from one forward pass.
pub struct LossInputs<'a> {
    pub pyramid: &'a DisparityPyramid,
    pub left: &'a [Var],
    pub right: &'a [Var],
    pub logits: Option<Var>,
    pub semantics: Semantics<'a>,
}

fn tag(term: &'static str) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite { op } => Error::NonFinite {
            op: format!("{term} loss ({op})"),
        },
        other => other,
    }
}

/// Weighted sum of the depth, semantic and discontinuity terms enabled by
/// `mode`. Inactive terms are reported as zero. Flipped batches contribute
/// only the depth term.
pub fn total_loss<T: Float>(
    g: &mut Graph<T>,
    inputs: &LossInputs<'_>,
    mode: LossMode,
    w: &LossWeights,
    ssim_cfg: &SsimConfig,
) -> Result<(Var, LossReport)> {
    w.validate()?;
    let target = match inputs.semantics {
        Semantics::Labels(t) => Some(t),
        Semantics::Flipped => None,
        Semantics::Unavailable if mode.needs_labels() => {
            return Err(Error::MissingSemantics(mode.as_str()))
        }
        Semantics::Unavailable => None,
    };

    let (depth, scales) = depth_loss(g, inputs.pyramid, inputs.left, inputs.right, w, ssim_cfg)
        .map_err(tag("depth"))?;
    let mut report = LossReport {
        depth: g.value(depth).item().as_f64(),
        scales,
        ..Default::default()
    };
    let mut total = g.scalar_mul(depth, w.alpha_d)?;

    if let Some(target) = target.filter(|_| mode.uses_semantic()) {
        let logits = inputs
            .logits
            .ok_or_else(|| Error::invalid("total_loss", "semantic logits were not computed"))?;
        let ls = semantic_loss(g, logits, target).map_err(tag("semantic"))?;
        report.semantic = g.value(ls).item().as_f64();
        let ls = g.scalar_mul(ls, w.alpha_s)?;
        total = g.add(total, ls)?;
    }
    if let Some(target) = target.filter(|_| mode.uses_cdd()) {
        let full = inputs
            .pyramid
            .first()
            .ok_or_else(|| Error::invalid("total_loss", "empty pyramid"))?;
        let lc = cdd_loss(g, full.left, target).map_err(tag("cdd"))?;
        report.cdd = g.value(lc).item().as_f64();
        let lc = g.scalar_mul(lc, w.alpha_cdd)?;
        total = g.add(total, lc)?;
    }
    report.total = g.value(total).item().as_f64();
    Ok((total, report))
}
