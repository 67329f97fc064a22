mod common;

use semdepth::data::{
    generate_dataset, generate_scene, load_manifest, load_sample, save_sample, Manifest,
    ObjectShape, SceneConfig, Visibility,
};
use semdepth::tensor::{Graph, WarpDirection};

#[test]
fn warped_right_view_rebuilds_left_on_visible_pixels() {
    let cfg = SceneConfig::default();
    for seed in 0..20 {
        let scene = generate_scene(&cfg, seed).unwrap();
        let s = &scene.sample;
        let mut g = Graph::<f32>::new();
        let right = g.constant(s.right.clone());
        let disp = g.constant(s.gt_disparity.clone());
        let rebuilt = g
            .warp_horizontal(right, disp, WarpDirection::LeftFromRight)
            .unwrap();
        let rebuilt = g.value(rebuilt);
        let plane = s.left.shape().plane();
        let (mut err, mut n) = (0.0f64, 0usize);
        for (p, v) in scene.visibility.iter().enumerate() {
            if *v != Visibility::Visible {
                continue;
            }
            for c in 0..3 {
                err += (rebuilt.data()[c * plane + p] - s.left.data()[c * plane + p]).abs() as f64;
                n += 1;
            }
        }
        assert!(n > plane, "scene {seed}: too few visible pixels");
        let mae = err / n as f64;
        assert!(mae < 1e-3, "scene {seed}: mean abs error {mae}");
    }
}

#[test]
fn right_disparity_rebuilds_right_view() {
    let cfg = SceneConfig::default();
    let scene = generate_scene(&cfg, 5).unwrap();
    let s = &scene.sample;
    // every right pixel shows the layer its right disparity names
    let mut g = Graph::<f32>::new();
    let left = g.constant(s.left.clone());
    let disp = g.constant(scene.right_disparity.clone());
    let rebuilt = g
        .warp_horizontal(left, disp, WarpDirection::RightFromLeft)
        .unwrap();
    let same = g
        .value(rebuilt)
        .data()
        .iter()
        .zip(s.right.data())
        .filter(|(a, b)| a == b)
        .count();
    assert!(same as f64 > 0.8 * s.right.numel() as f64);
}

#[test]
fn occluded_area_matches_disparity_steps() {
    let cfg = SceneConfig {
        min_objects: 1,
        max_objects: 1,
        ..Default::default()
    };
    let (mut rects, mut disks) = (0, 0);
    for seed in 0..200 {
        let scene = generate_scene(&cfg, seed).unwrap();
        let o = &scene.objects[0];
        let step = (o.disparity - cfg.d_min) as usize;
        // keep the occluded strip inside the frame and the right view
        if o.x < step + cfg.d_min as usize || step > o.width {
            continue;
        }
        let occluded = scene
            .visibility
            .iter()
            .filter(|&&v| v == Visibility::Occluded)
            .count();
        let expected = step * o.height;
        match o.shape {
            ObjectShape::Rect => {
                assert_eq!(occluded, expected, "seed {seed}: {o:?}");
                rects += 1;
            }
            ObjectShape::Disk => {
                // narrow rows near the poles hide less than the full step
                assert!(
                    occluded <= expected && 2 * occluded >= expected,
                    "seed {seed}: {occluded} vs {expected}"
                );
                disks += 1;
            }
        }
    }
    assert!(
        rects >= 10 && disks >= 5,
        "{rects} rectangles, {disks} disks checked"
    );
}

#[test]
fn object_free_scene_is_a_shifted_plane() {
    let cfg = SceneConfig {
        min_objects: 0,
        max_objects: 0,
        ..Default::default()
    };
    let s = generate_scene(&cfg, 3).unwrap().sample;
    assert!(s.gt_disparity.data().iter().all(|&d| d == cfg.d_min as f32));
    assert!(s.semantic.iter().all(|&l| l == 0));
    let d = cfg.d_min as usize;
    for c in 0..3 {
        for y in 0..cfg.height {
            for x in d..cfg.width {
                assert_eq!(s.right.at([0, c, y, x - d]), s.left.at([0, c, y, x]));
            }
        }
    }
}

#[test]
fn sample_round_trip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    for seed in 0..3 {
        let s = generate_scene(&SceneConfig::default(), seed)
            .unwrap()
            .sample;
        let prefix = dir.path().join(format!("s{seed}"));
        save_sample(&prefix, &s).unwrap();
        let back = load_sample(&prefix).unwrap();
        assert_eq!(back.left, s.left);
        assert_eq!(back.right, s.right);
        assert_eq!(back.semantic, s.semantic);
        assert_eq!(back.calib, s.calib);
        for (a, b) in back.gt_disparity.data().iter().zip(s.gt_disparity.data()) {
            assert!((a - b).abs() <= 1.0 / 512.0);
        }
    }
}

#[test]
fn generated_dataset_loads_and_splits() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::small_scene_config();
    let manifest = generate_dataset(dir.path(), &cfg, 5).unwrap();
    let m = load_manifest(&manifest).unwrap();
    assert_eq!(m.len(), 5);
    let first = load_sample(&m.entries()[0]).unwrap();
    let again = generate_dataset(&dir.path().join("again"), &cfg, 1).unwrap();
    let again = load_sample(&load_manifest(&again).unwrap().entries()[0]).unwrap();
    assert_eq!(first, again);
}

#[test]
fn split_of_two_hundred_is_reproducible_disjoint_and_exhaustive() {
    let m = Manifest::new((0..200).map(|i| format!("s{i:03}").into()).collect()).unwrap();
    let (tr, ev) = m.split(11, 160, 40).unwrap();
    let (tr2, ev2) = m.split(11, 160, 40).unwrap();
    assert_eq!((tr.entries(), ev.entries()), (tr2.entries(), ev2.entries()));
    assert_eq!((tr.len(), ev.len()), (160, 40));
    let mut all: Vec<_> = tr.entries().iter().chain(ev.entries()).cloned().collect();
    all.sort();
    all.dedup();
    assert_eq!(all.len(), 200);
}
