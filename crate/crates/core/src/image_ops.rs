//! Differentiable image-domain operators built on the graph: horizontal
//! warping, SSIM and forward-difference spatial gradients.

use crate::error::{Error, Result};
use crate::tensor::{Axis, Float, Graph, Var, WarpDirection};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimConfig {
    /// Side of the square average-pooling window.
    pub window: usize,
    pub c1: f64,
    pub c2: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        SsimConfig {
            window: 3,
            c1: 0.01 * 0.01,
            c2: 0.03 * 0.03,
        }
    }
}

impl SsimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || !(self.c1 > 0.0) || !(self.c2 > 0.0) {
            return Err(Error::Config(format!("invalid SSIM config {self:?}")));
        }
        Ok(())
    }
}

/// Direction of a spatial forward difference.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradientAxis {
    X,
    Y,
}

/// Reconstructs one view of a rectified pair by sampling `source` at
/// `(i, j - d)` (left from right) or `(i, j + d)` (right from left).
pub fn warp_horizontal<T: Float>(
    g: &mut Graph<T>,
    source: Var,
    disparity: Var,
    direction: WarpDirection,
) -> Result<Var> {
    g.warp_horizontal(source, disparity, direction)
}

/// Per-pixel SSIM map from window means, variances and covariance.
///
/// Pooling is unpadded, so the map is `window - 1` smaller than the inputs
/// in each spatial dimension. Values are clamped to `[-1, 1]`.
pub fn ssim<T: Float>(g: &mut Graph<T>, a: Var, b: Var, cfg: &SsimConfig) -> Result<Var> {
    cfg.validate()?;
    let (sa, sb) = (g.shape(a), g.shape(b));
    if sa != sb {
        return Err(Error::ShapeMismatch {
            op: "ssim",
            lhs: sa,
            rhs: sb,
        });
    }
    if cfg.window > sa.height() || cfg.window > sa.width() {
        return Err(Error::invalid(
            "ssim",
            format!("window {} larger than image {sa}", cfg.window),
        ));
    }
    let k = cfg.window;
    let mu_a = g.avg_pool(a, k, 1)?;
    let mu_b = g.avg_pool(b, k, 1)?;
    let aa = g.mul(a, a)?;
    let bb = g.mul(b, b)?;
    let ab = g.mul(a, b)?;
    let e_aa = g.avg_pool(aa, k, 1)?;
    let e_bb = g.avg_pool(bb, k, 1)?;
    let e_ab = g.avg_pool(ab, k, 1)?;
    let mu_aa = g.mul(mu_a, mu_a)?;
    let mu_bb = g.mul(mu_b, mu_b)?;
    let mu_ab = g.mul(mu_a, mu_b)?;
    let var_a = g.sub(e_aa, mu_aa)?;
    let var_b = g.sub(e_bb, mu_bb)?;
    let cov = g.sub(e_ab, mu_ab)?;

    let n1 = g.scalar_mul(mu_ab, 2.0)?;
    let n1 = g.scalar_add(n1, cfg.c1)?;
    let n2 = g.scalar_mul(cov, 2.0)?;
    let n2 = g.scalar_add(n2, cfg.c2)?;
    let num = g.mul(n1, n2)?;

    let d1 = g.add(mu_aa, mu_bb)?;
    let d1 = g.scalar_add(d1, cfg.c1)?;
    let d2 = g.add(var_a, var_b)?;
    let d2 = g.scalar_add(d2, cfg.c2)?;
    let den = g.mul(d1, d2)?;

    let s = g.div(num, den)?;
    g.clamp(s, -1.0, 1.0)
}

/// Forward difference along `axis`; the output loses one column (x) or
/// one row (y).
pub fn spatial_gradient<T: Float>(g: &mut Graph<T>, input: Var, axis: GradientAxis) -> Result<Var> {
    match axis {
        GradientAxis::X => g.diff(input, Axis::Width),
        GradientAxis::Y => g.diff(input, Axis::Height),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SplitMix64;
    use crate::tensor::{Shape, Tensor};

    fn random(shape: Shape, seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
        let mut r = SplitMix64::new(seed);
        Tensor::from_fn(shape, |_| r.uniform(lo, hi))
    }

    #[test]
    fn zero_disparity_is_identity() {
        let mut g = Graph::<f32>::new();
        let img = random(Shape::new(2, 3, 5, 7), 1, 0.0, 1.0).cast::<f32>();
        let src = g.constant(img.clone());
        let d = g.constant(Tensor::zeros(Shape::new(2, 1, 5, 7)));
        for dir in [WarpDirection::LeftFromRight, WarpDirection::RightFromLeft] {
            let w = warp_horizontal(&mut g, src, d, dir).unwrap();
            assert_eq!(g.value(w), &img);
        }
    }

    #[test]
    fn unit_disparity_on_ramp() {
        let mut g = Graph::<f64>::new();
        let ramp = Tensor::from_fn(Shape::new(1, 1, 3, 6), |[_, _, _, x]| x as f64);
        let src = g.constant(ramp);
        let d = g.constant(Tensor::full(Shape::new(1, 1, 3, 6), 1.0));
        let w = warp_horizontal(&mut g, src, d, WarpDirection::LeftFromRight).unwrap();
        for y in 0..3 {
            for x in 0..6 {
                let expected = if x == 0 { 0.0 } else { x as f64 - 1.0 };
                assert_eq!(g.value(w).at([0, 0, y, x]), expected);
            }
        }
    }

    #[test]
    fn integer_shift_matches_index_oracle() {
        let img = random(Shape::new(1, 2, 4, 9), 7, 0.0, 1.0);
        for k in 0..5usize {
            for (dir, sign) in [
                (WarpDirection::LeftFromRight, -1i64),
                (WarpDirection::RightFromLeft, 1),
            ] {
                let mut g = Graph::<f64>::new();
                let src = g.constant(img.clone());
                let d = g.constant(Tensor::full(Shape::new(1, 1, 4, 9), k as f64));
                let w = warp_horizontal(&mut g, src, d, dir).unwrap();
                let oracle = Tensor::from_fn(img.shape(), |[b, c, y, x]| {
                    let sx = (x as i64 + sign * k as i64).clamp(0, 8) as usize;
                    img.at([b, c, y, sx])
                });
                assert_eq!(g.value(w), &oracle, "k={k} dir={dir:?}");
            }
        }
    }

    #[test]
    fn warp_rejects_mismatched_disparity() {
        let mut g = Graph::<f64>::new();
        let src = g.constant(Tensor::zeros(Shape::new(1, 3, 4, 4)));
        let d = g.constant(Tensor::zeros(Shape::new(1, 1, 4, 5)));
        assert!(warp_horizontal(&mut g, src, d, WarpDirection::LeftFromRight).is_err());
    }

    #[test]
    fn ssim_self_similarity() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(random(Shape::new(2, 3, 8, 8), 3, 0.0, 1.0));
        let s = ssim(&mut g, x, x, &SsimConfig::default()).unwrap();
        assert_eq!(g.shape(s), Shape::new(2, 3, 6, 6));
        assert!(g.value(s).data().iter().all(|v| (v - 1.0).abs() < 1e-6));
    }

    #[test]
    fn ssim_constant_images_closed_form() {
        let cfg = SsimConfig::default();
        let (a, b) = (0.2f64, 0.8f64);
        // zero variance: the structure factor is c2 / c2
        let expected = ((2.0 * a * b + cfg.c1) * cfg.c2) / ((a * a + b * b + cfg.c1) * cfg.c2);
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(Shape::new(1, 1, 5, 5), a));
        let y = g.constant(Tensor::full(Shape::new(1, 1, 5, 5), b));
        let s = ssim(&mut g, x, y, &cfg).unwrap();
        for v in g.value(s).data() {
            assert!((v - expected).abs() < 1e-12, "{v} vs {expected}");
        }
    }

    #[test]
    fn ssim_is_symmetric() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(random(Shape::new(1, 3, 8, 8), 4, 0.0, 1.0));
        let y = g.constant(random(Shape::new(1, 3, 8, 8), 5, 0.0, 1.0));
        let s1 = ssim(&mut g, x, y, &SsimConfig::default()).unwrap();
        let s2 = ssim(&mut g, y, x, &SsimConfig::default()).unwrap();
        for (p, q) in g.value(s1).data().iter().zip(g.value(s2).data()) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn ssim_window_too_large() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(Shape::new(1, 1, 2, 8)));
        assert!(ssim(&mut g, x, x, &SsimConfig::default()).is_err());
    }

    #[test]
    fn gradient_of_fields() {
        let mut g = Graph::<f64>::new();
        let c = g.constant(Tensor::full(Shape::new(1, 1, 4, 4), 3.0));
        let gc = spatial_gradient(&mut g, c, GradientAxis::X).unwrap();
        assert!(g.value(gc).data().iter().all(|&v| v == 0.0));
        let r = g.constant(Tensor::from_fn(Shape::new(1, 1, 4, 4), |[_, _, _, x]| {
            x as f64
        }));
        let gr = spatial_gradient(&mut g, r, GradientAxis::X).unwrap();
        assert!(g.value(gr).data().iter().all(|&v| v == 1.0));
        let gy = spatial_gradient(&mut g, r, GradientAxis::Y).unwrap();
        assert!(g.value(gy).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_matches_direct_subtraction() {
        let t = random(Shape::new(1, 1, 4, 4), 11, -1.0, 1.0);
        let mut g = Graph::<f64>::new();
        let v = g.constant(t.clone());
        let gx = spatial_gradient(&mut g, v, GradientAxis::X).unwrap();
        let gy = spatial_gradient(&mut g, v, GradientAxis::Y).unwrap();
        for i in 0..4 {
            for j in 0..3 {
                assert_eq!(
                    g.value(gx).at([0, 0, i, j]),
                    t.at([0, 0, i, j + 1]) - t.at([0, 0, i, j])
                );
                assert_eq!(
                    g.value(gy).at([0, 0, j, i]),
                    t.at([0, 0, j + 1, i]) - t.at([0, 0, j, i])
                );
            }
        }
    }

    #[test]
    fn degenerate_gradient_axis() {
        let mut g = Graph::<f64>::new();
        let v = g.constant(Tensor::zeros(Shape::new(1, 1, 4, 1)));
        assert!(spatial_gradient(&mut g, v, GradientAxis::X).is_err());
    }
}
