#![allow(dead_code)]

use stereovol::calibration::ReferenceCard;
use stereovol::synth::{self, GroundTruth, RenderedView, Scene, SceneKind};
use stereovol::volume::SegmentationMap;
use stereovol::{CameraIntrinsics, PipelineInputs};

/// A rendered two-view scene with its ground truth.
pub struct Fixture {
    pub scene: Scene,
    pub k: CameraIntrinsics,
    pub v1: RenderedView,
    pub v2: RenderedView,
    pub seg: SegmentationMap,
    pub card: ReferenceCard,
    pub truth: GroundTruth,
}

impl Fixture {
    pub fn generated(kind: SceneKind, angle_deg: f64, seed: u64) -> Self {
        Self::from_spec(synth::generated_scene(kind, angle_deg, seed))
    }

    pub fn from_spec(spec: synth::SceneSpec) -> Self {
        let scene = synth::make_scene(spec).unwrap();
        let k = synth::default_intrinsics();
        let v1 = scene.render(0, &k);
        let v2 = scene.render(1, &k);
        let seg = SegmentationMap::new(v1.labels.clone()).unwrap();
        let card = ReferenceCard::new(scene.card_pattern.clone().unwrap());
        let truth = synth::ground_truth(&scene, 0, 1);
        Self { scene, k, v1, v2, seg, card, truth }
    }

    pub fn inputs(&self) -> PipelineInputs<'_> {
        PipelineInputs { img1: &self.v1.image, img2: &self.v2.image, seg: &self.seg, k1: &self.k, k2: &self.k, card: &self.card }
    }
}
