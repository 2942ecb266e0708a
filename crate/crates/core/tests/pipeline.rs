mod common;

use common::Fixture;
use stereovol::calibration::CalibrationError;
use stereovol::pipeline::{run_pipeline_detailed, Stage, StageError};
use stereovol::synth::SceneKind;
use stereovol::volume::{SegmentationMap, VolumeError};
use stereovol::{run_pipeline, PipelineConfig, PipelineError, PipelineInputs, Raster};

#[test]
fn same_seed_gives_identical_reports() {
    let f = Fixture::generated(SceneKind::TwoItems, 20.0, 60);
    let cfg = PipelineConfig { seed: 11, ..PipelineConfig::default() };
    let a = run_pipeline_detailed(&f.inputs(), &cfg).unwrap();
    let b = run_pipeline(&f.inputs(), &cfg).unwrap();
    assert_eq!(serde_json::to_string(&a.report).unwrap(), serde_json::to_string(&b).unwrap());

    let r = &a.report;
    assert_eq!(r.items.iter().map(|i| i.label).collect::<Vec<_>>(), vec![2, 3]);
    assert!(r.items.iter().all(|i| i.volume_ml > 0.0));
    let d = &r.diagnostics;
    assert!(d.pose_inliers.unwrap() > 100);
    assert!(d.disparity_valid_fraction.unwrap() > 0.5);
    assert!(d.rim_inliers.unwrap() >= 20 && d.table_inliers.unwrap() >= 10);
    assert_eq!(d.mesh_vertices, Some(a.mesh.vertices.len()));
    let stages: Vec<&str> = d.timings.iter().map(|(s, _)| s.as_str()).collect();
    assert_eq!(stages, ["calibration", "stereo", "volume", "total"]);
    // Table offset below the rim: the generated plates have 20 mm rims.
    assert!((d.table_offset_mm.unwrap() + 20.0).abs() < 3.0, "{:?}", d.table_offset_mm);
}

#[test]
fn identical_images_lack_parallax() {
    let f = Fixture::generated(SceneKind::Hemisphere, 20.0, 61);
    let inputs = PipelineInputs { img2: &f.v1.image, ..f.inputs() };
    match run_pipeline(&inputs, &PipelineConfig::default()) {
        Err(PipelineError::Stage { stage, hint, source }) => {
            assert_eq!(stage, Stage::Calibration);
            assert!(matches!(source, StageError::Calibration(CalibrationError::InsufficientParallax { .. })));
            assert!(hint.contains("15–25°"), "{hint}");
        }
        other => panic!("expected a parallax failure, got {other:?}"),
    }
}

#[test]
fn missing_segmentation_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pair").join("seg.png");
    let err = SegmentationMap::load(&path).unwrap_err();
    assert!(matches!(err, VolumeError::Io { .. }));
    assert!(err.to_string().contains(&path.display().to_string()), "{err}");
}

#[test]
fn input_and_config_errors_precede_the_stages() {
    let f = Fixture::generated(SceneKind::Box, 20.0, 62);
    let small = SegmentationMap::new(Raster::from_fn(40, 30, |x, _| (x > 10) as u8 + (x > 20) as u8)).unwrap();
    let err = run_pipeline(&PipelineInputs { seg: &small, ..f.inputs() }, &PipelineConfig::default()).unwrap_err();
    assert!(matches!(err, PipelineError::Input(_)) && err.is_input_error(), "{err}");

    let mut cfg = PipelineConfig::default();
    cfg.stereo.census_window = 8;
    let err = run_pipeline(&f.inputs(), &cfg).unwrap_err();
    assert!(matches!(err, PipelineError::Config(_)), "{err}");
}

#[test]
fn artifacts_are_written() {
    let f = Fixture::generated(SceneKind::Hemisphere, 22.5, 63);
    let out = run_pipeline_detailed(&f.inputs(), &PipelineConfig::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    out.write_artifacts(dir.path()).unwrap();
    for name in ["rect1.png", "rect2.png", "disparity.png", "mesh.obj"] {
        assert!(dir.path().join(name).is_file(), "{name}");
    }
    let png = Raster::<u16>::load_png16(dir.path().join("disparity.png")).unwrap();
    assert_eq!(png, out.disparity.to_png16());
    let obj = std::fs::read_to_string(dir.path().join("mesh.obj")).unwrap();
    assert_eq!(obj.lines().filter(|l| l.starts_with("v ")).count(), out.mesh.vertices.len());
}
