//! On-disk layout of an image pair directory.
//!
//! ```text
//! <pair>/img1.png         first view
//! <pair>/img2.png         second view
//! <pair>/seg.png          labels of the first view (0 background, 1 dish, 2.. food)
//! <pair>/intrinsics.json  one camera for both views, or {"first": …, "second": …}
//! <pair>/card.png         reference card pattern, unless the config names one
//! <pair>/truth.json       ground truth (synthetic pairs only)
//! <pair>/meta.json        scene description (synthetic pairs only)
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use stereovol::calibration::ReferenceCard;
use stereovol::metrics::TruthRecord;
use stereovol::synth::{self, GroundTruth, Scene, SceneSpec};
use stereovol::volume::SegmentationMap;
use stereovol::{CameraIntrinsics, ImageGray, PipelineConfig, PipelineInputs};

pub const IMG1: &str = "img1.png";
pub const IMG2: &str = "img2.png";
pub const SEG: &str = "seg.png";
pub const INTRINSICS: &str = "intrinsics.json";
pub const CARD: &str = "card.png";
pub const TRUTH: &str = "truth.json";
pub const META: &str = "meta.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum IntrinsicsFile {
    Pair { first: CameraIntrinsics, second: CameraIntrinsics },
    Shared(CameraIntrinsics),
}

/// Everything the pipeline reads for one pair.
#[derive(Debug, Clone)]
pub struct PairData {
    pub name: String,
    pub img1: ImageGray,
    pub img2: ImageGray,
    pub seg: SegmentationMap,
    pub k1: CameraIntrinsics,
    pub k2: CameraIntrinsics,
    pub card: ReferenceCard,
}

impl PairData {
    pub fn inputs(&self) -> PipelineInputs<'_> {
        PipelineInputs {
            img1: &self.img1,
            img2: &self.img2,
            seg: &self.seg,
            k1: &self.k1,
            k2: &self.k2,
            card: &self.card,
        }
    }
}

/// Directory name used in item ids.
pub fn pair_name(dir: &Path) -> String {
    dir.file_name().map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned())
}

/// `<pair>#<label>`.
pub fn item_id(pair: &str, label: u8) -> String {
    format!("{pair}#{label}")
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("malformed {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("cannot write {}", path.display()))
}

pub fn load_intrinsics(path: &Path) -> Result<(CameraIntrinsics, CameraIntrinsics)> {
    let (k1, k2) = match read_json::<IntrinsicsFile>(path)? {
        IntrinsicsFile::Pair { first, second } => (first, second),
        IntrinsicsFile::Shared(k) => (k, k),
    };
    for k in [&k1, &k2] {
        k.validate().with_context(|| format!("invalid intrinsics in {}", path.display()))?;
    }
    Ok((k1, k2))
}

pub fn load_pair(dir: &Path, cfg: &PipelineConfig) -> Result<PairData> {
    let img1 = ImageGray::load(dir.join(IMG1))?;
    let img2 = ImageGray::load(dir.join(IMG2))?;
    let seg = SegmentationMap::load(dir.join(SEG))?;
    let (k1, k2) = load_intrinsics(&dir.join(INTRINSICS))?;
    let card_path = cfg.reference_card.pattern.clone().unwrap_or_else(|| dir.join(CARD));
    let pattern = ImageGray::load(&card_path)?;
    let card = ReferenceCard { pattern, physical_width: cfg.reference_card.physical_width_mm };
    Ok(PairData { name: pair_name(dir), img1, img2, seg, k1, k2, card })
}

/// Pair directories under `root` (those holding a first view), sorted by
/// name; `root` itself when it is a pair.
pub fn find_pairs(root: &Path) -> Result<Vec<PathBuf>> {
    if root.join(IMG1).is_file() {
        return Ok(vec![root.to_path_buf()]);
    }
    let entries = fs::read_dir(root).with_context(|| format!("cannot read directory {}", root.display()))?;
    let mut pairs = Vec::new();
    for e in entries {
        let path = e?.path();
        if path.join(IMG1).is_file() {
            pairs.push(path);
        }
    }
    if pairs.is_empty() {
        bail!("no pair directories (containing {IMG1}) under {}", root.display());
    }
    pairs.sort_by_key(|p| pair_name(p));
    Ok(pairs)
}

/// Ground truth by item id, from a JSON-lines file of truth records, a pair
/// directory or a directory of pairs.
pub fn load_truth(path: &Path) -> Result<BTreeMap<String, f64>> {
    let mut truth = BTreeMap::new();
    if path.is_file() {
        let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let r: TruthRecord =
                serde_json::from_str(line).with_context(|| format!("{}:{}: malformed truth record", path.display(), i + 1))?;
            truth.insert(r.item, r.volume_ml);
        }
        return Ok(truth);
    }
    let dirs: Vec<PathBuf> = if path.join(TRUTH).is_file() {
        vec![path.to_path_buf()]
    } else {
        let mut d: Vec<PathBuf> = fs::read_dir(path)
            .with_context(|| format!("cannot read directory {}", path.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join(TRUTH).is_file())
            .collect();
        d.sort();
        d
    };
    if dirs.is_empty() {
        bail!("no {TRUTH} found under {}", path.display());
    }
    for dir in dirs {
        let gt: GroundTruth = read_json(&dir.join(TRUTH))?;
        let name = pair_name(&dir);
        for it in gt.items {
            truth.insert(item_id(&name, it.label), it.volume_ml);
        }
    }
    Ok(truth)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthMeta {
    pub viewing_angle_deg: f64,
    pub spec: SceneSpec,
}

/// Renders cameras 0 and 1 of `spec` into `dir`.
pub fn write_synth_pair(dir: &Path, spec: SceneSpec, k: &CameraIntrinsics) -> Result<GroundTruth> {
    let scene: Scene = synth::make_scene(spec)?;
    if scene.spec.cameras.len() < 2 {
        bail!("a scene needs at least two cameras");
    }
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let v1 = scene.render(0, k);
    let v2 = scene.render(1, k);
    v1.image.save_png(dir.join(IMG1))?;
    v2.image.save_png(dir.join(IMG2))?;
    SegmentationMap::new(v1.labels)?.save_png(dir.join(SEG))?;
    write_json(&dir.join(INTRINSICS), k)?;
    if let Some(card) = &scene.card_pattern {
        card.save_png(dir.join(CARD))?;
    }
    let gt = synth::ground_truth(&scene, 0, 1);
    write_json(&dir.join(TRUTH), &gt)?;
    let meta = SynthMeta {
        viewing_angle_deg: synth::viewing_angle_deg(&scene.spec.cameras[0], &scene.spec.cameras[1]),
        spec: scene.spec,
    };
    write_json(&dir.join(META), &meta)?;
    Ok(gt)
}

pub fn load_scene_spec(path: &Path) -> Result<SceneSpec> {
    read_json(path)
}
