//! System-level acceptance checks. Each test prints one `PASS`/`FAIL` line
//! to stderr (bypassing output capture) and then asserts its verdict. The
//! tests hold a shared lock so timings are measured on an idle machine.

use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::sync::{Mutex, MutexGuard};
use std::time::Instant;

use nalgebra::Rotation3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use stereovol::calibration::{self, CalibrationConfig, ReferenceCard};
use stereovol::geometry::{direction_angle, rotation_angle_between};
use stereovol::metrics::MetricsReport;
use stereovol::robust::essential::{decompose_essential, epipolar_distance, lm_refine, FivePointEstimator, LmConfig};
use stereovol::robust::five_point::five_point_solver;
use stereovol::robust::line::{Line, LineEstimator};
use stereovol::robust::{self, adaptive_threshold, inlier_fitness, RansacConfig, ThresholdPolicy};
use stereovol::stereo::{self, census_transform, dp_row, dp_stereo, RectifiedPair, StereoConfig};
use stereovol::synth::{self, SceneKind};
use stereovol::volume::{
    integrate_volume, sample_mesh, DepthMap, LabeledMesh, MeshTriangle, MeshVertex, SegmentationMap,
};
use stereovol::{
    run_pipeline, CameraIntrinsics, ImageGray, ImagePoint, Matrix3, NormalizedMatch, PipelineConfig, PipelineInputs,
    Plane, Point2, Point3, Raster, RelativePose, Vector3,
};

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn verdict(name: &str, pass: bool, detail: &str) {
    let tag = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr().lock(), "[{tag}] {name}: {detail}");
    assert!(pass, "{name}: {detail}");
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

struct Rendered {
    img1: ImageGray,
    img2: ImageGray,
    seg: SegmentationMap,
    k: CameraIntrinsics,
    card: ReferenceCard,
    truth: synth::GroundTruth,
}

fn render(kind: SceneKind, angle_deg: f64, seed: u64) -> Rendered {
    let scene = synth::make_scene(synth::generated_scene(kind, angle_deg, seed)).unwrap();
    let k = synth::default_intrinsics();
    let v1 = scene.render(0, &k);
    let v2 = scene.render(1, &k);
    Rendered {
        seg: SegmentationMap::new(v1.labels).unwrap(),
        img1: v1.image,
        img2: v2.image,
        card: ReferenceCard::new(scene.card_pattern.clone().unwrap()),
        truth: synth::ground_truth(&scene, 0, 1),
        k,
    }
}

impl Rendered {
    fn inputs(&self) -> PipelineInputs<'_> {
        PipelineInputs { img1: &self.img1, img2: &self.img2, seg: &self.seg, k1: &self.k, k2: &self.k, card: &self.card }
    }
}

// ---------------------------------------------------------------------------
// End-to-end accuracy

/// Absolute percentage error per item, or `None` when the pipeline failed
/// (counted as 100%), and the wall-clock time of the pipeline.
fn run_scene(kind: SceneKind, angle: f64, seed: u64) -> (Vec<(u8, f64, Option<f64>)>, f64) {
    let r = render(kind, angle, seed);
    let t = Instant::now();
    let report = run_pipeline(&r.inputs(), &PipelineConfig::default());
    let secs = t.elapsed().as_secs_f64();
    let items = r
        .truth
        .items
        .iter()
        .map(|it| {
            let est = report.as_ref().ok().and_then(|rep| rep.volume_of(it.label));
            (it.label, it.volume_ml, est)
        })
        .collect();
    (items, secs)
}

#[test]
fn end_to_end_accuracy_and_runtime() {
    let _g = serial();
    let kinds = [SceneKind::Hemisphere, SceneKind::Box, SceneKind::TwoItems];
    let mut apes = Vec::new();
    let mut worst_secs: f64 = 0.0;
    let mut failed = 0;
    for i in 0..24 {
        let kind = kinds[i % kinds.len()];
        let angle = 15.0 + (i % 5) as f64 * 2.5;
        let (items, secs) = run_scene(kind, angle, 1000 + i as u64);
        worst_secs = worst_secs.max(secs);
        for (label, truth, est) in items {
            let ape = match est {
                Some(e) => 100.0 * ((truth - e) / truth).abs(),
                None => {
                    failed += 1;
                    100.0
                }
            };
            let _ = writeln!(
                std::io::stderr().lock(),
                "    scene {i:2} {kind:?} {angle:4.1}° label {label}: truth {truth:7.2} mL, estimate {}, {secs:.2} s",
                est.map_or("failed".to_string(), |e| format!("{e:7.2} mL ({:+.1}%)", 100.0 * (e / truth - 1.0)))
            );
            apes.push(ape);
        }
    }
    let mape = apes.iter().sum::<f64>() / apes.len() as f64;
    let pass = mape <= 12.0 && worst_secs < 15.0;
    verdict(
        "end-to-end accuracy over 24 synthetic scenes",
        pass,
        &format!("MAPE_overall {mape:.2}% (limit 12%) over {} items, {failed} failed; slowest pair {worst_secs:.2} s (limit 15 s)", apes.len()),
    );
}

#[test]
fn hemisphere_pair_estimate() {
    let _g = serial();
    let mut spec = synth::generated_scene(SceneKind::Hemisphere, 20.0, 0);
    spec.items.truncate(1);
    spec.items[0].shape = synth::ItemShape::Hemisphere { radius_mm: 30.0 };
    let scene = synth::make_scene(spec).unwrap();
    let k = synth::default_intrinsics();
    let (v1, v2) = (scene.render(0, &k), scene.render(1, &k));
    let seg = SegmentationMap::new(v1.labels).unwrap();
    let card = ReferenceCard::new(scene.card_pattern.clone().unwrap());
    let inputs = PipelineInputs { img1: &v1.image, img2: &v2.image, seg: &seg, k1: &k, k2: &k, card: &card };
    let truth = 2.0 / 3.0 * std::f64::consts::PI * 30f64.powi(3) / 1000.0;
    let est = run_pipeline(&inputs, &PipelineConfig::default()).map(|r| r.total_ml());
    let (pass, detail) = match est {
        Ok(v) => ((v / truth - 1.0).abs() <= 0.10, format!("{v:.2} mL vs {truth:.2} mL ({:+.1}%, limit ±10%)", 100.0 * (v / truth - 1.0))),
        Err(e) => (false, format!("pipeline failed: {e}")),
    };
    verdict("radius-30 mm hemisphere at 20°", pass, &detail);
}

// ---------------------------------------------------------------------------
// Adaptive threshold

/// Brute-force threshold: every data quantile is tried, and the noise CDF at
/// it is counted from scratch.
fn scan_threshold(data: &[f64], noise: &[f64], p: f64) -> Option<f64> {
    let (n, m) = (data.len() as f64, noise.len() as f64);
    let mut best = None;
    for k in 1..=data.len() {
        let t = data[k - 1];
        let below = noise.iter().filter(|&&d| d <= t).count() as f64;
        if below * n < p * k as f64 * m {
            best = Some(t);
        }
    }
    best
}

fn line_fixture(rng: &mut ChaCha8Rng, inliers: usize, outliers: usize, noise: f64) -> (Vec<Point2>, Vec<bool>) {
    let mut pts = Vec::new();
    let mut is_inlier = Vec::new();
    for _ in 0..inliers {
        let x = rng.random_range(0.0..10.0);
        pts.push(Point2::new(x, 2.0 * x + 1.0 + rng.random_range(-noise..noise)));
        is_inlier.push(true);
    }
    for _ in 0..outliers {
        pts.push(Point2::new(rng.random_range(0.0..10.0), rng.random_range(-5.0..25.0)));
        is_inlier.push(false);
    }
    (pts, is_inlier)
}

#[test]
fn adaptive_threshold_agrees_with_scan_and_bounds_false_discoveries() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut mismatches = Vec::new();
    let mut resolved = 0;
    for trial in 0..100 {
        let n = rng.random_range(20..300);
        let m = rng.random_range(100..2000);
        let inlier_frac = rng.random_range(0.0..1.0);
        let spread = rng.random_range(0.1..20.0);
        let mut data: Vec<f64> = (0..n)
            .map(|_| if rng.random_bool(inlier_frac) { rng.random_range(0.0..spread) } else { rng.random_range(0.0..100.0) })
            .collect();
        let mut noise: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..100.0)).collect();
        data.sort_by(f64::total_cmp);
        noise.sort_by(f64::total_cmp);
        let p = [0.01, 0.03, 0.05, 0.1][trial % 4];
        let got = adaptive_threshold(&data, &noise, p).ok();
        let want = scan_threshold(&data, &noise, p);
        resolved += usize::from(want.is_some());
        if got != want {
            mismatches.push(format!("trial {trial}: {got:?} vs {want:?}"));
        }
    }

    let data: Vec<f64> = (1..=90).map(|i| i as f64 / 10.0).chain((2..=11).map(|i| 10.0 * i as f64)).collect();
    let noise: Vec<f64> = (1..=100).map(|i| 10.0 * i as f64).collect();
    let worked = adaptive_threshold(&data, &noise, 0.03);
    let all_noise_above = adaptive_threshold(&[1.0, 2.0, 3.0], &[4.0; 100], 0.01);

    let mut fdps = Vec::new();
    let p = RansacConfig::default().noise_pollution_p;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(7000 + seed);
        let outliers = rng.random_range(30..100);
        let (pts, is_inlier) = line_fixture(&mut rng, 100, outliers, 0.1);
        let policy = ThresholdPolicy::adaptive(&LineEstimator, &pts, RansacConfig::default().noise_samples, seed);
        match robust::ransac(&pts, &LineEstimator, &policy, &RansacConfig::default(), seed) {
            Ok(fit) => {
                let false_hits = fit.inliers.iter().filter(|&&i| !is_inlier[i]).count();
                fdps.push(false_hits as f64 / fit.inliers.len().max(1) as f64);
            }
            Err(_) => fdps.push(1.0),
        }
    }
    let mean_fdp = fdps.iter().sum::<f64>() / fdps.len() as f64;
    let max_fdp = fdps.iter().cloned().fold(0.0, f64::max);

    let pass = mismatches.is_empty()
        && worked == Ok(20.0)
        && all_noise_above == Ok(3.0)
        && mean_fdp <= p + 0.02;
    verdict(
        "adaptive threshold",
        pass,
        &format!(
            "{} of 100 random fixtures differ from the scan ({resolved} resolvable){}; worked example {worked:?}; \
             dominated noise {all_noise_above:?}; false discoveries mean {:.2}% max {:.2}% (limit {:.0}%)",
            mismatches.len(),
            mismatches.first().map_or(String::new(), |m| format!(", first {m}")),
            100.0 * mean_fdp,
            100.0 * max_fdp,
            100.0 * (p + 0.02)
        ),
    );
}

// ---------------------------------------------------------------------------
// Five-point solver and pose refinement

fn random_pose(rng: &mut ChaCha8Rng) -> RelativePose {
    let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    let rot = Rotation3::from_scaled_axis(axis.normalize() * rng.random_range(0.05..0.6)).into_inner();
    let t = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-0.5..0.5));
    RelativePose::from_direction(rot, t)
}

/// Exact matches of points in front of both cameras; `noise` is added to the
/// normalized coordinates.
fn pose_matches(rng: &mut ChaCha8Rng, pose: &RelativePose, n: usize, noise: f64) -> Vec<NormalizedMatch> {
    let gauss = Normal::new(0.0, noise.max(f64::MIN_POSITIVE)).unwrap();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let z = rng.random_range(2.0..8.0);
        let p = Point3::new(rng.random_range(-0.6..0.6) * z, rng.random_range(-0.45..0.45) * z, z);
        let q = pose.transform(&p);
        if q.z < 0.5 {
            continue;
        }
        let mut jitter = || if noise > 0.0 { gauss.sample(rng) } else { 0.0 };
        let a = Point2::new(p.x / p.z + jitter(), p.y / p.z + jitter());
        let b = Point2::new(q.x / q.z + jitter(), q.y / q.z + jitter());
        out.push(NormalizedMatch::new(a, b));
    }
    out
}

#[test]
fn five_point_recovers_random_poses() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let (mut worst_r, mut worst_t) = (0f64, 0f64);
    let mut failures = 0;
    for _ in 0..1000 {
        let pose = random_pose(&mut rng);
        let matches = pose_matches(&mut rng, &pose, 25, 0.0);
        let Ok(cands) = five_point_solver(&matches[..5]) else {
            failures += 1;
            continue;
        };
        // The extra matches pick the candidate and resolve the chirality.
        let score = |e: &stereovol::EssentialModel| matches[5..].iter().map(|m| epipolar_distance(e, m)).sum::<f64>();
        let Some(best) = cands.iter().min_by(|a, b| score(a).total_cmp(&score(b))) else {
            failures += 1;
            continue;
        };
        match decompose_essential(best, &matches) {
            Ok(est) => {
                worst_r = worst_r.max(rotation_angle_between(&est.rotation, &pose.rotation));
                worst_t = worst_t.max(direction_angle(&est.translation, &pose.translation));
            }
            Err(_) => failures += 1,
        }
    }

    let k = synth::default_intrinsics();
    let sigma = 0.5 / k.fx;
    let mut errors = Vec::new();
    for trial in 0..60u64 {
        let pose = random_pose(&mut rng);
        let matches = pose_matches(&mut rng, &pose, 200, sigma);
        let cfg = CalibrationConfig::default().ransac;
        let policy = ThresholdPolicy::adaptive(&FivePointEstimator, &matches, cfg.noise_samples, trial);
        let err = robust::ransac(&matches, &FivePointEstimator, &policy, &cfg, trial)
            .and_then(|fit| {
                let inl: Vec<NormalizedMatch> = fit.inliers.iter().map(|&i| matches[i]).collect();
                let start = decompose_essential(&fit.model, &inl)?;
                let (refined, _) = lm_refine(&start, &inl, &LmConfig::default())?;
                Ok(rotation_angle_between(&refined.rotation, &pose.rotation).to_degrees())
            })
            .unwrap_or(180.0);
        errors.push(err);
    }
    let med = median(&mut errors);
    let pass = failures == 0 && worst_r < 1e-6 && worst_t < 1e-6 && med < 0.2;
    verdict(
        "five-point pose recovery",
        pass,
        &format!(
            "noiseless over 1000 poses: worst rotation {worst_r:.2e} rad, worst direction {worst_t:.2e} rad, \
             {failures} failures (limit 1e-6 rad); 0.5 px noise with refinement: median rotation error {med:.4}° (limit 0.2°)"
        ),
    );
}

// ---------------------------------------------------------------------------
// Local optimization

#[test]
fn local_optimization_keeps_or_improves_fitness() {
    let _g = serial();
    let (mut plain_f, mut lo_f, mut gains) = (Vec::new(), Vec::new(), Vec::new());
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let (pts, _) = line_fixture(&mut rng, 100, 30, 0.3);
        let with_lo = RansacConfig::default();
        let plain_cfg = RansacConfig { local_optimization: false, ..with_lo.clone() };
        let policy = ThresholdPolicy::adaptive(&LineEstimator, &pts, with_lo.noise_samples, seed + 1);
        let plain = robust::ransac(&pts, &LineEstimator, &policy, &plain_cfg, seed).unwrap();
        let lo = robust::ransac(&pts, &LineEstimator, &policy, &with_lo, seed).unwrap();
        // Both models are scored at the plain run's threshold.
        let fitness = |l: &Line| {
            let d: Vec<f64> = pts.iter().map(|p| l.distance(p)).collect();
            inlier_fitness(&d, plain.threshold)
        };
        let (a, b) = (fitness(&plain.model), fitness(&lo.model));
        plain_f.push(a);
        lo_f.push(b);
        gains.push(b - a);
    }
    let (mp, ml, mg) = (median(&mut plain_f), median(&mut lo_f), median(&mut gains));
    verdict(
        "local optimization ablation over 20 seeds",
        ml >= mp,
        &format!("median fitness with LO {ml:.4}, without {mp:.4}; median paired gain {mg:+.4}"),
    );
}

// ---------------------------------------------------------------------------
// Dense stereo

fn textured(w: usize, h: usize, seed: u64) -> ImageGray {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Raster::from_fn(w + 1, h + 1, |_, _| rng.random::<u8>());
    Raster::from_fn(w, h, |x, y| {
        let s: u32 = [(0, 0), (1, 0), (0, 1), (1, 1)].iter().map(|&(dx, dy)| noise.get(x + dx, y + dy) as u32).sum();
        (s / 4) as u8
    })
}

/// Rectified pair whose second image is the first moved by `shift` columns.
fn shifted_pair(shift: usize) -> RectifiedPair {
    let (w, h) = (200, 120);
    let big = textured(w + shift, h, 9);
    let k = CameraIntrinsics::new(400.0, 400.0, 159.5, 119.5, 320, 240).unwrap();
    let pose = RelativePose::from_direction(Matrix3::identity(), Vector3::new(-1.0, 0.0, 0.0)).with_scale(100.0);
    let blank = ImageGray::new(320, 240, 0);
    let frame = stereo::rectify(&blank, &blank, &pose, &k, &k).unwrap().frame;
    RectifiedPair {
        rect1: Raster::from_fn(w, h, |x, y| big.get(x + shift, y)),
        rect2: Raster::from_fn(w, h, |x, y| big.get(x, y)),
        valid1: Raster::new(w, h, true),
        valid2: Raster::new(w, h, true),
        frame,
    }
}

/// Cost of one labelling: data costs, `lam[x]·|d − d'|` between consecutive
/// labelled pixels and `lam[x] + tau` per skipped pixel.
fn labelling_cost(path: &[Option<i32>], lam: &[f64], tau: f64, cost: &dyn Fn(usize, i32) -> f64) -> f64 {
    let mut c = 0.0;
    for (x, s) in path.iter().enumerate() {
        match *s {
            None => c += lam[x] + tau,
            Some(d) => {
                c += cost(x, d);
                if let Some(Some(p)) = x.checked_sub(1).map(|i| path[i]) {
                    c += lam[x] * (d - p).abs() as f64;
                }
            }
        }
    }
    c
}

fn all_labellings(lo: &[i32], hi: &[i32]) -> Vec<Vec<Option<i32>>> {
    let mut out = vec![Vec::new()];
    for x in 0..lo.len() {
        let mut next = Vec::new();
        for p in &out {
            for s in std::iter::once(None).chain((lo[x]..=hi[x]).map(Some)) {
                let mut q = p.clone();
                q.push(s);
                next.push(q);
            }
        }
        out = next;
    }
    out
}

/// Textbook DP over explicit (state, state) transitions.
fn naive_dp(lo: &[i32], hi: &[i32], lam: &[f64], tau: f64, cost: &dyn Fn(usize, i32) -> f64) -> f64 {
    let states = |x: usize| -> Vec<Option<i32>> { std::iter::once(None).chain((lo[x]..=hi[x]).map(Some)).collect() };
    let mut prev: Vec<(Option<i32>, f64)> =
        states(0).into_iter().map(|s| (s, s.map_or(lam[0] + tau, |d| cost(0, d)))).collect();
    for x in 1..lo.len() {
        prev = states(x)
            .into_iter()
            .map(|s| {
                let best = prev
                    .iter()
                    .map(|&(p, c)| {
                        c + match (p, s) {
                            (_, None) => lam[x] + tau,
                            (None, Some(d)) => cost(x, d),
                            (Some(q), Some(d)) => cost(x, d) + lam[x] * (d - q).abs() as f64,
                        }
                    })
                    .fold(f64::INFINITY, f64::min);
                (s, best)
            })
            .collect();
    }
    prev.iter().map(|p| p.1).fold(f64::INFINITY, f64::min)
}

#[test]
fn dense_stereo_shift_dp_optimality_and_census() {
    let _g = serial();
    let pair = shifted_pair(7);
    let roi = Raster::from_fn(200, 120, |x, y| (10..190).contains(&x) && (6..114).contains(&y));
    let cfg = StereoConfig { target_roi_area: 200.0 * 120.0, ..StereoConfig::default() };
    let d = dp_stereo(&pair, (0.0, 20.0), &roi, &cfg).unwrap();
    let (mut n, mut good) = (0usize, 0usize);
    for y in 10..110 {
        for x in 14..180 {
            if d.valid.get(x, y) {
                n += 1;
                good += usize::from((d.values.get(x, y) - 7.0).abs() <= 1.0);
            }
        }
    }
    let shift_frac = good as f64 / n.max(1) as f64;

    let mut rng = ChaCha8Rng::seed_from_u64(91);
    let mut dp_bad = Vec::new();
    for trial in 0..200 {
        let n = if trial < 100 { rng.random_range(1..=8) } else { rng.random_range(9..=32) };
        let lo: Vec<i32> = (0..n).map(|_| rng.random_range(-3..=2)).collect();
        let span = if n <= 8 { 2 } else { 6 };
        let hi: Vec<i32> = lo.iter().map(|l| l + rng.random_range(0..=span)).collect();
        let lam: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..4.0)).collect();
        let tau = rng.random_range(0.0..10.0);
        let table: Vec<Vec<f64>> = (0..n).map(|_| (0..16).map(|_| rng.random_range(0.0..12.0)).collect()).collect();
        let cost = |x: usize, d: i32| table[x][(d + 4) as usize];
        let (path, c) = dp_row(&lo, &hi, &lam, tau, cost);
        let oracle = if n <= 8 {
            all_labellings(&lo, &hi).iter().map(|p| labelling_cost(p, &lam, tau, &cost)).fold(f64::INFINITY, f64::min)
        } else {
            naive_dp(&lo, &hi, &lam, tau, &cost)
        };
        let in_range = path.iter().enumerate().all(|(x, s)| s.is_none_or(|d| (lo[x]..=hi[x]).contains(&d)));
        if (c - oracle).abs() > 1e-9 || (labelling_cost(&path, &lam, tau, &cost) - c).abs() > 1e-9 || !in_range {
            dp_bad.push(trial);
        }
    }

    // Rounded gamma 0.45 is strictly increasing on multiples of 4.
    let gamma = |v: u8| (255.0 * (v as f64 / 255.0).powf(0.45)).round() as u8;
    let injective = (4..=252u8).step_by(4).zip((8..=252u8).step_by(4)).all(|(a, b)| gamma(a) < gamma(b));
    let img = textured(64, 48, 3).map(|v| (v / 4).clamp(1, 63) * 4);
    let census_equal = (3..=7).step_by(2).all(|w| census_transform(&img, w) == census_transform(&img.map(gamma), w));

    let pass = shift_frac >= 0.95 && n > 10_000 && dp_bad.is_empty() && injective && census_equal;
    verdict(
        "dense stereo",
        pass,
        &format!(
            "shift fixture {:.2}% of {n} pixels within 1 px (limit 95%); DP optimal on {} of 200 rows of 1-32 columns; \
             Census codes unchanged under gamma: {census_equal}",
            100.0 * shift_frac,
            200 - dp_bad.len()
        ),
    );
}

// ---------------------------------------------------------------------------
// Metric scale

#[test]
fn metric_scale_from_card() {
    let _g = serial();
    let cfg = CalibrationConfig::default();
    let mut errors = Vec::new();
    let mut failed = Vec::new();
    for (i, kind) in [SceneKind::Hemisphere, SceneKind::Box, SceneKind::TwoItems, SceneKind::Dome].iter().cycle().take(8).enumerate() {
        let r = render(*kind, 20.0, 200 + i as u64);
        let result = calibration::estimate_relative_pose(&r.img1, &r.img2, &r.k, &r.k, &cfg, i as u64)
            .and_then(|mut est| calibration::estimate_scale(&mut est, &r.card, &cfg, i as u64 + 1));
        match result {
            Ok(s) => errors.push(100.0 * (s.scale / r.truth.scale_mm - 1.0)),
            Err(e) => failed.push(format!("scene {i}: {e}")),
        }
    }
    let worst = errors.iter().map(|e| e.abs()).fold(0.0, f64::max);
    verdict(
        "metric scale from the reference card on 8 scenes",
        failed.is_empty() && worst <= 1.0,
        &format!("worst scale error {worst:.3}% (limit 1%); errors {errors:.2?}; failures {failed:?}"),
    );
}

// ---------------------------------------------------------------------------
// Volume integration

/// Depth map of a height field above the plane z = 400 seen from the origin
/// along +z.
fn height_field(k: CameraIntrinsics, height: impl Fn(f64, f64) -> f64) -> DepthMap {
    let (w, h) = (k.width as usize, k.height as usize);
    let depth = Raster::from_fn(w, h, |x, y| {
        let n = k.normalize(&ImagePoint::new(x as f64, y as f64));
        // Fixed point of z = 400 − height(z·n); converges since |∇h|·|n| < 1.
        let mut z = 400.0;
        for _ in 0..60 {
            z = 400.0 - height(z * n.x, z * n.y);
        }
        z as f32
    });
    DepthMap { depth, valid: Raster::new(w, h, true), intrinsics: k }
}

fn hemisphere_volume(mesh_size: usize) -> f64 {
    let r = 30.0f64;
    // The footprint spans about 40k pixels, enough for a 2^14-sample grid.
    let k = CameraIntrinsics::new(1500.0, 1500.0, 255.5, 255.5, 512, 512).unwrap();
    let depth = height_field(k, |x, y| (r * r - x * x - y * y).max(0.0).sqrt());
    // Only the footprint is food, so the samples lie on the hemisphere; one
    // corner pixel is dish because labels must be contiguous.
    let seg = SegmentationMap::new(Raster::from_fn(512, 512, |x, y| {
        let n = k.normalize(&ImagePoint::new(x as f64, y as f64));
        let z = depth.depth.get(x, y) as f64;
        match (x, y) {
            (0, 0) => 1,
            _ if (z * n.x).hypot(z * n.y) < r => 2,
            _ => 0,
        }
    }))
    .unwrap();
    let mesh = sample_mesh(&depth, &seg, mesh_size).unwrap();
    integrate_volume(&mesh, &Plane::new(Vector3::new(0.0, 0.0, -1.0), -400.0).unwrap()).total_ml()
}

#[test]
fn volume_integration_accuracy() {
    let _g = serial();
    let v = |x: f64, y: f64, z: f64, i: u32| MeshVertex { position: Point3::new(x, y, z), pixel: [i, 0], label: 2 };
    // A 10 × 10 mm square 10 mm above the table: 1 mL.
    let prism = LabeledMesh {
        vertices: vec![v(0.0, 0.0, 390.0, 0), v(10.0, 0.0, 390.0, 1), v(10.0, 10.0, 390.0, 2), v(0.0, 10.0, 390.0, 3)],
        triangles: vec![MeshTriangle { vertices: [0, 1, 2], label: 2 }, MeshTriangle { vertices: [0, 2, 3], label: 2 }],
    };
    let prism_ml = integrate_volume(&prism, &Plane::new(Vector3::new(0.0, 0.0, -1.0), -400.0).unwrap()).total_ml();
    let truth = 2.0 / 3.0 * std::f64::consts::PI * 27_000.0 / 1000.0;
    let coarse = hemisphere_volume(1 << 12) / truth - 1.0;
    let fine = hemisphere_volume(1 << 14) / truth - 1.0;
    let pass = (prism_ml - 1.0).abs() <= 1e-9 && coarse.abs() <= 0.02 && fine.abs() <= 0.01 && fine.abs() < coarse.abs();
    verdict(
        "volume integration",
        pass,
        &format!(
            "prism {prism_ml:.12} mL (exact 1); hemisphere {:+.3}% at 2^12 samples (limit 2%), {:+.3}% at 2^14 (limit 1%)",
            100.0 * coarse,
            100.0 * fine
        ),
    );
}

// ---------------------------------------------------------------------------
// Metrics through the command line

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_stereovol"))
}

fn write_lines(path: &Path, lines: &[serde_json::Value]) {
    let text: String = lines.iter().map(|l| l.to_string() + "\n").collect();
    std::fs::write(path, text).unwrap();
}

#[test]
fn metrics_match_hand_computed_values() {
    let _g = serial();
    let dir = tempfile::tempdir().unwrap();
    let rec = |item: &str, run: usize, e: f64| serde_json::json!({"item": item, "pair": 0, "run": run, "estimate_ml": e});
    write_lines(
        &dir.path().join("records.jsonl"),
        &[rec("a#2", 0, 90.0), rec("a#2", 1, 110.0), rec("b#2", 0, 45.0), rec("b#2", 1, 45.0), rec("b#2", 2, 60.0)],
    );
    write_lines(
        &dir.path().join("truth.jsonl"),
        &[serde_json::json!({"item": "a#2", "volume_ml": 100.0}), serde_json::json!({"item": "b#2", "volume_ml": 50.0})],
    );
    let out = bin()
        .args(["metrics", "records.jsonl", "--truth", "truth.jsonl"])
        .current_dir(dir.path())
        .output()
        .unwrap();
    let report: Option<MetricsReport> = serde_json::from_slice(&out.stdout).ok();
    // a: errors 10% and 10%, σ = 10 about a mean of 100.
    // b: errors 10%, 10% and 20%; mean 50, σ² = (25 + 25 + 100) / 3 = 50.
    let want = [("a#2", 10.0, 10.0), ("b#2", 40.0 / 3.0, 100.0 * 50f64.sqrt() / 50.0)];
    let overall = (10.0 + 40.0 / 3.0) / 2.0;
    let mut worst = f64::INFINITY;
    if let Some(r) = &report {
        worst = (r.mape_overall - overall).abs();
        for ((item, mape, cv), got) in want.iter().zip(&r.items) {
            if got.item != *item {
                worst = f64::INFINITY;
            }
            worst = worst.max((got.mape - mape).abs()).max((got.cv - cv).abs());
        }
    }
    verdict(
        "evaluation metrics on fixture records",
        out.status.success() && worst <= 1e-12,
        &format!("exit status {}, largest deviation from the hand-computed values {worst:.1e} (limit 1e-12)", out.status),
    );
}

// ---------------------------------------------------------------------------
// Determinism

#[test]
fn batch_runs_are_byte_identical() {
    let _g = serial();
    let dir = tempfile::tempdir().unwrap();
    let suite = dir.path().join("suite");
    let synth = bin().args(["synth", "--count", "3", "--seed", "500", "--out"]).arg(&suite).status().unwrap();
    let mut outputs = Vec::new();
    let mut statuses = Vec::new();
    for run in 0..2 {
        let out = dir.path().join(format!("run{run}.jsonl"));
        let status =
            bin().args(["batch", "--repeats", "2", "--seed", "7", "--out"]).arg(&out).arg(&suite).status().unwrap();
        statuses.push(status.success());
        outputs.push(std::fs::read(&out).unwrap_or_default());
    }
    let records = String::from_utf8_lossy(&outputs[0]).lines().count();
    let pass = synth.success() && statuses.iter().all(|s| *s) && records > 0 && outputs[0] == outputs[1];
    verdict(
        "batch determinism",
        pass,
        &format!(
            "two runs over 3 pairs × 2 repeats: {records} records, outputs identical: {}, exit statuses ok: {statuses:?}",
            outputs[0] == outputs[1]
        ),
    );
}
