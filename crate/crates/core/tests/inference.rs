mod common;

use semdepth::data::{decode_disparity, read_pgm16, read_pgm8, StereoSample};
use semdepth::metrics::{write_metrics_csv, EvalConfig, CSV_HEADER};
use semdepth::network::{init_params, load_checkpoint, save_checkpoint, ModelParams};
use semdepth::train::{evaluate, predict, write_prediction};

fn setup() -> (ModelParams, Vec<StereoSample>) {
    let params = init_params(&common::small_model_config(), 8).unwrap();
    (params, common::scenes(&common::small_scene_config(), 0..3))
}

/// A disparity head with zero weights predicts one value everywhere, so its
/// mirrored prediction coincides with the plain one.
fn constant_disparity_model() -> ModelParams {
    let mut params = init_params(&common::small_model_config(), 8).unwrap();
    let idx = params
        .named()
        .position(|(n, _)| n == "depth.disp0.weight")
        .unwrap();
    params.tensors_mut()[idx].data_mut().fill(0.0);
    params
}

/// Depth metrics recomputed from the prediction with plain loops. Both
/// depths are clamped to the evaluation range; non-positive predictions
/// fall to its lower end.
fn reference_abs_rel_and_delta1(pred: &[f32], s: &StereoSample, cfg: &EvalConfig) -> (f64, f64) {
    let fb = s.calib.focal_px * s.calib.baseline_m;
    let depth =
        |d: f32| if d > 0.0 { fb / d as f64 } else { 0.0 }.clamp(cfg.min_depth, cfg.max_depth);
    let (mut abs_rel, mut within, mut n) = (0.0, 0.0, 0.0);
    for (&dp, &dg) in pred.iter().zip(s.gt_disparity.data()) {
        if dg <= 0.0 {
            continue;
        }
        let (zp, zg) = (depth(dp), depth(dg));
        abs_rel += (zp - zg).abs() / zg;
        within += f64::from(u8::from((zp / zg).max(zg / zp) < cfg.delta_base));
        n += 1.0;
    }
    (abs_rel / n, within / n)
}

#[test]
fn evaluate_matches_direct_recomputation() {
    let (params, samples) = setup();
    let cfg = EvalConfig::default();
    for pp in [false, true] {
        let rows = evaluate(&params, &samples, &cfg, pp).unwrap();
        assert_eq!(rows.len(), samples.len());
        for (row, s) in rows.iter().zip(&samples) {
            let pred = predict(&params, &s.left, pp).unwrap();
            let (abs_rel, delta1) = reference_abs_rel_and_delta1(pred.disparity.data(), s, &cfg);
            assert!(
                (row.depth.abs_rel - abs_rel).abs() < 1e-9 * abs_rel.max(1.0),
                "{row:?}"
            );
            assert!((row.depth.delta1 - delta1).abs() < 1e-12);
            let acc = row.semantic_accuracy.unwrap();
            assert!((0.0..=1.0).contains(&acc));
        }
    }
}

#[test]
fn metrics_csv_has_a_line_per_sample_plus_header_and_mean() {
    let (params, samples) = setup();
    let rows = evaluate(&params, &samples, &EvalConfig::default(), false).unwrap();
    let mut out = Vec::new();
    write_metrics_csv(&mut out, &rows).unwrap();
    let text = String::from_utf8(out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), samples.len() + 2);
    assert_eq!(lines[0], CSV_HEADER);
    assert!(lines[samples.len() + 1].starts_with("mean,"));
    let columns = CSV_HEADER.split(',').count();
    assert!(lines.iter().all(|l| l.split(',').count() == columns));
}

#[test]
fn flip_averaging_is_a_no_op_for_constant_disparity() {
    let params = constant_disparity_model();
    let samples = common::scenes(&common::small_scene_config(), 0..2);
    let cfg = EvalConfig::default();
    let plain = evaluate(&params, &samples, &cfg, false).unwrap();
    let pp = evaluate(&params, &samples, &cfg, true).unwrap();
    assert_eq!(plain, pp);
}

#[test]
fn flip_averaging_changes_only_disparity() {
    let (params, samples) = setup();
    let a = predict(&params, &samples[0].left, false).unwrap();
    let b = predict(&params, &samples[0].left, true).unwrap();
    assert_eq!(a.labels, b.labels);
    assert_ne!(a.disparity, b.disparity);
}

#[test]
fn written_prediction_round_trips() {
    let (params, samples) = setup();
    let pred = predict(&params, &samples[1].left, true).unwrap();
    let classes = params.config().num_classes as u8;
    assert!(pred.labels.iter().all(|&l| l < classes));

    let dir = tempfile::tempdir().unwrap();
    let [disp, sem, preview] = write_prediction(&dir.path().join("p"), &pred).unwrap();
    let (h, w, codes) = read_pgm16(&disp).unwrap();
    assert_eq!(
        (h, w),
        (
            pred.disparity.shape().height(),
            pred.disparity.shape().width()
        )
    );
    for (&c, &d) in codes.iter().zip(pred.disparity.data()) {
        assert!((decode_disparity(c) - d).abs() <= 0.5 / 256.0);
    }
    assert_eq!(read_pgm8(&sem).unwrap().2, pred.labels);
    assert_eq!(read_pgm8(&preview).unwrap().2.len(), h * w);
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let (params, samples) = setup();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.bin");
    save_checkpoint(&path, &params).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.checksum(), params.checksum());
    assert_eq!(
        predict(&back, &samples[0].left, true).unwrap(),
        predict(&params, &samples[0].left, true).unwrap()
    );
}

#[test]
fn wrong_image_size_is_rejected() {
    let params = init_params(&common::small_model_config(), 1).unwrap();
    let other = common::scenes(&semdepth::data::SceneConfig::default(), 0..1);
    assert!(predict(&params, &other[0].left, false).is_err());
}
