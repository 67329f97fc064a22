#![allow(dead_code)]

use semdepth::data::{generate_scene, SceneConfig, StereoSample};
use semdepth::network::ModelConfig;

/// 32x64 scenes with a two-level model: small enough for many training
/// steps per test.
pub fn small_scene_config() -> SceneConfig {
    SceneConfig {
        height: 32,
        width: 64,
        d_max: 12,
        max_objects: 3,
        object_scale: 1.5,
        ..Default::default()
    }
}

pub fn small_model_config() -> ModelConfig {
    ModelConfig {
        encoder_channels: vec![4, 8],
        height: 32,
        width: 64,
        ..Default::default()
    }
}

pub fn scenes(cfg: &SceneConfig, seeds: std::ops::Range<u64>) -> Vec<StereoSample> {
    seeds
        .map(|s| generate_scene(cfg, s).unwrap().sample)
        .collect()
}

/// Mirrors the left half of every map onto the right half, giving a sample
/// that equals its own horizontal mirror image.
pub fn mirror_symmetric(s: &StereoSample) -> StereoSample {
    let sym = |t: &semdepth::tensor::Tensor<f32>| {
        let w = t.shape().width();
        semdepth::tensor::Tensor::from_fn(t.shape(), |[n, c, y, x]| {
            t.at([n, c, y, x.min(w - 1 - x)])
        })
    };
    let w = s.width();
    let semantic = (0..s.semantic.len())
        .map(|p| {
            let (y, x) = (p / w, p % w);
            s.semantic[y * w + x.min(w - 1 - x)]
        })
        .collect();
    StereoSample {
        left: sym(&s.left),
        right: sym(&s.right),
        semantic,
        gt_disparity: sym(&s.gt_disparity),
        calib: s.calib,
    }
}
