mod common;

use common::Fixture;
use stereovol::calibration::{estimate_from_matches, estimate_relative_pose, estimate_scale, CalibrationConfig};
use stereovol::features::Feature;
use stereovol::geometry::{direction_angle, rotation_angle_between, ImagePoint};
use stereovol::synth::SceneKind;
use stereovol::CameraIntrinsics;

#[test]
fn pose_and_scale_on_rendered_pairs() {
    let cfg = CalibrationConfig::default();
    for (i, kind) in [SceneKind::Box, SceneKind::Hemisphere, SceneKind::TwoItems].into_iter().enumerate() {
        let seed = 40 + i as u64;
        let f = Fixture::generated(kind, 20.0, seed);
        let mut est = estimate_relative_pose(&f.v1.image, &f.v2.image, &f.k, &f.k, &cfg, seed).unwrap();
        let rot = rotation_angle_between(&est.pose.rotation, &f.truth.pose.rotation).to_degrees();
        let dir = direction_angle(&est.pose.translation, &f.truth.pose.translation).to_degrees();
        assert!(rot < 0.3, "seed {seed}: rotation error {rot}°");
        assert!(dir < 2.0, "seed {seed}: translation direction error {dir}°");
        let sc = estimate_scale(&mut est, &f.card, &cfg, seed).unwrap();
        let rel = sc.scale / f.truth.scale_mm - 1.0;
        assert!(rel.abs() < 0.01, "seed {seed}: scale error {:.3}%", 100.0 * rel);
        assert_eq!(est.pose.scale, sc.scale);
    }
}

#[test]
fn scaled_card_points_keep_physical_distances() {
    let cfg = CalibrationConfig::default();
    let f = Fixture::generated(SceneKind::Box, 20.0, 44);
    let mut est = estimate_relative_pose(&f.v1.image, &f.v2.image, &f.k, &f.k, &cfg, 1).unwrap();
    let sc = estimate_scale(&mut est, &f.card, &cfg, 1).unwrap();
    let located: Vec<_> = sc
        .card_points
        .iter()
        .map(|&ci| {
            let (p, _) = est.inlier_pixels(est.cloud.source_match[ci]);
            let mm = sc.card_homography.apply(&nalgebra::Point2::new(p.u, p.v)).unwrap();
            (est.cloud.points[ci], mm)
        })
        .collect();
    let (mut within, mut total) = (0, 0);
    for (i, (p, a)) in located.iter().enumerate() {
        for (q, b) in &located[i + 1..] {
            let physical = (a - b).norm();
            if physical > 20.0 {
                total += 1;
                within += usize::from(((p - q).norm() / physical - 1.0).abs() <= cfg.mode_bin_width);
            }
        }
    }
    assert!(total >= 30, "{total} card point pairs");
    assert!(within as f64 >= 0.9 * total as f64, "{within}/{total} pairs within the bin width");
}

#[test]
fn pose_is_invariant_to_pixel_scaling() {
    // Power-of-two factors keep normalized coordinates bit-identical, so any
    // pixel-unit constant in the pose stage would show up as a difference.
    let cfg = CalibrationConfig::default();
    let f = Fixture::generated(SceneKind::Hemisphere, 20.0, 45);
    let est = estimate_relative_pose(&f.v1.image, &f.v2.image, &f.k, &f.k, &cfg, 3).unwrap();
    for factor in [2.0, 0.5] {
        let scale_features = |fs: &[Feature]| -> Vec<Feature> {
            fs.iter()
                .map(|ft| {
                    let mut ft = ft.clone();
                    let p = ft.point.position;
                    ft.point.position = ImagePoint::new(factor * p.u, factor * p.v);
                    ft
                })
                .collect()
        };
        let k = CameraIntrinsics::new(
            factor * f.k.fx,
            factor * f.k.fy,
            factor * f.k.cx,
            factor * f.k.cy,
            (factor * f.k.width as f64) as u32,
            (factor * f.k.height as f64) as u32,
        )
        .unwrap();
        let scaled = estimate_from_matches(
            scale_features(&est.features1),
            scale_features(&est.features2),
            est.matches.clone(),
            &k,
            &k,
            &cfg,
            3,
        )
        .unwrap();
        assert_eq!(est.inliers, scaled.inliers);
        let rot = rotation_angle_between(&est.pose.rotation, &scaled.pose.rotation);
        let dir = direction_angle(&est.pose.translation, &scaled.pose.translation);
        assert!(rot < 1e-6 && dir < 1e-6, "factor {factor}: rotation {rot} rad, direction {dir} rad");
    }
}
