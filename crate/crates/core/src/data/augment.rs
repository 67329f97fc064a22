use super::rng::SplitMix64;
use super::StereoSample;
use crate::error::{Error, Result};
use crate::losses::IGNORE_LABEL;
use crate::tensor::Tensor;

/// Sampling ranges of the training-time augmentation.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    pub gamma: (f64, f64),
    pub brightness: (f64, f64),
    /// Independent per-channel multiplier.
    pub color: (f64, f64),
    pub flip_probability: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            gamma: (0.8, 1.2),
            brightness: (0.5, 2.0),
            color: (0.8, 1.2),
            flip_probability: 0.5,
        }
    }
}

impl AugmentConfig {
    /// Leaves every sample unchanged.
    pub fn identity() -> Self {
        AugmentConfig {
            gamma: (1.0, 1.0),
            brightness: (1.0, 1.0),
            color: (1.0, 1.0),
            flip_probability: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in [
            ("gamma", self.gamma),
            ("brightness", self.brightness),
            ("color", self.color),
        ] {
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                return Err(Error::Config(format!(
                    "{name} range [{lo}, {hi}] must be positive and ordered"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return Err(Error::Config(format!(
                "flip probability {} outside [0, 1]",
                self.flip_probability
            )));
        }
        Ok(())
    }

    pub fn sample(&self, seed: u64) -> AugmentParams {
        let mut rng = SplitMix64::derive(seed, 0xA065);
        let gamma = rng.uniform(self.gamma.0, self.gamma.1);
        let brightness = rng.uniform(self.brightness.0, self.brightness.1);
        let color = [0, 1, 2].map(|_| rng.uniform(self.color.0, self.color.1));
        let flip = rng.chance(self.flip_probability);
        AugmentParams {
            gamma,
            brightness,
            color,
            flip,
        }
    }
}

/// One concrete draw of the augmentation.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentParams {
    pub gamma: f64,
    pub brightness: f64,
    pub color: [f64; 3],
    pub flip: bool,
}

impl AugmentParams {
    pub fn identity() -> Self {
        AugmentParams {
            gamma: 1.0,
            brightness: 1.0,
            color: [1.0; 3],
            flip: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Augmented {
    pub sample: StereoSample,
    /// The views were mirrored and swapped; the ground truth no longer
    /// describes the reference view and has been invalidated.
    pub flipped: bool,
}

fn photometric(image: &Tensor<f32>, p: &AugmentParams) -> Tensor<f32> {
    let plane = image.shape().plane();
    let mut out = image.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let c = (i / plane) % 3;
        let x = (*v as f64).powf(p.gamma) * p.brightness * p.color[c];
        *v = x.clamp(0.0, 1.0) as f32;
    }
    out
}

/// Applies `p` to both views: `clamp(x^gamma * brightness * color_c)`,
/// then an optional mirror-and-swap that makes the right view the
/// reference.
pub fn augment_with(sample: &StereoSample, p: &AugmentParams) -> Augmented {
    let unchanged = p.gamma == 1.0 && p.brightness == 1.0 && p.color == [1.0; 3];
    let (left, right) = if unchanged {
        (sample.left.clone(), sample.right.clone())
    } else {
        (photometric(&sample.left, p), photometric(&sample.right, p))
    };
    if !p.flip {
        return Augmented {
            sample: StereoSample {
                left,
                right,
                ..sample.clone()
            },
            flipped: false,
        };
    }
    Augmented {
        sample: StereoSample {
            left: right.flip_horizontal(),
            right: left.flip_horizontal(),
            semantic: vec![IGNORE_LABEL; sample.semantic.len()],
            gt_disparity: Tensor::zeros(sample.gt_disparity.shape()),
            calib: sample.calib,
        },
        flipped: true,
    }
}

/// Draws parameters from `cfg` with `seed` and applies them.
pub fn augment(sample: &StereoSample, cfg: &AugmentConfig, seed: u64) -> Augmented {
    augment_with(sample, &cfg.sample(seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_scene, SceneConfig};
    use crate::tensor::Shape;

    fn sample() -> StereoSample {
        generate_scene(&SceneConfig::default(), 5).unwrap().sample
    }

    #[test]
    fn identity_leaves_sample_unchanged() {
        let s = sample();
        let a = augment(&s, &AugmentConfig::identity(), 3);
        assert!(!a.flipped);
        assert_eq!(a.sample, s);
    }

    #[test]
    fn double_flip_restores_images() {
        let s = sample();
        let p = AugmentParams {
            flip: true,
            ..AugmentParams::identity()
        };
        let once = augment_with(&s, &p);
        assert!(once.flipped);
        assert!(!once.sample.has_labels());
        assert!(once.sample.gt_disparity.data().iter().all(|&d| d == 0.0));
        let twice = augment_with(&once.sample, &p);
        assert_eq!(twice.sample.left, s.left);
        assert_eq!(twice.sample.right, s.right);
    }

    #[test]
    fn gamma_on_constant_image() {
        let mut s = sample();
        let v = 0.6f32;
        s.left = Tensor::full(Shape::new(1, 3, 64, 128), v);
        for g in [0.8, 1.0, 1.2] {
            let p = AugmentParams {
                gamma: g,
                ..AugmentParams::identity()
            };
            let a = augment_with(&s, &p);
            let expected = (v as f64).powf(g) as f32;
            assert!(a.sample.left.data().iter().all(|&x| x == expected));
        }
    }

    #[test]
    fn photometric_keeps_ground_truth_and_range() {
        let s = sample();
        for seed in 0..20 {
            let a = augment(&s, &AugmentConfig::default(), seed);
            assert!(a.sample.left.data().iter().all(|v| (0.0..=1.0).contains(v)));
            if !a.flipped {
                assert_eq!(a.sample.semantic, s.semantic);
                assert_eq!(a.sample.gt_disparity, s.gt_disparity);
            }
        }
    }

    #[test]
    fn draws_stay_in_range() {
        let cfg = AugmentConfig::default();
        let mut flips = 0;
        for seed in 0..200 {
            let p = cfg.sample(seed);
            assert!((0.8..=1.2).contains(&p.gamma));
            assert!((0.5..=2.0).contains(&p.brightness));
            assert!(p.color.iter().all(|c| (0.8..=1.2).contains(c)));
            flips += p.flip as usize;
        }
        assert!((70..130).contains(&flips), "{flips} flips in 200 draws");
        assert!(AugmentConfig {
            flip_probability: 1.5,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
