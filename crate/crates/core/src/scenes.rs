//! Deterministic synthetic detection scenes.
//!
//! Each scene is a single-channel `H x W` image with a faint noise background
//! and 0..k axis-aligned objects. Every class is drawn with its own texture so
//! classes stay separable. Scene `i` is generated from a seed derived from
//! `(spec.seed, i)` only, so the dataset does not depend on generation order.

use std::fs;
use std::io::Write;
use std::path::Path;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::anchors::{iou, BBox};
use crate::error::{Error, Result};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
/// Maximum pairwise IoU between objects of one scene.
pub const MAX_OBJECT_IOU: f64 = 0.3;
const PLACEMENT_TRIES: usize = 100;
const BACKGROUND_NOISE: f64 = 0.15;
const OBJECT_NOISE: f64 = 0.05;

/// How a class is painted inside its box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Texture {
    Solid { level: f64 },
    Ring { level: f64, thickness: usize },
    Checker { level: f64, low: f64, cell: usize },
}

impl Texture {
    /// Default texture for 1-based class `k`: solid, ring, checker, then
    /// repeating with a dimmer level.
    pub fn default_for_class(k: usize) -> Texture {
        let tier = ((k - 1) / 3) as f64;
        let level = (0.9 - 0.15 * tier).max(0.45);
        match (k - 1) % 3 {
            0 => Texture::Solid { level },
            1 => Texture::Ring { level, thickness: 2 },
            _ => Texture::Checker {
                level,
                low: 0.3,
                cell: 2,
            },
        }
    }

    /// Noise-free intensity at `(dx, dy)` inside a `w x h` box.
    pub fn value_at(&self, dx: usize, dy: usize, w: usize, h: usize) -> f64 {
        match *self {
            Texture::Solid { level } => level,
            Texture::Ring { level, thickness } => {
                let edge = dx.min(dy).min(w - 1 - dx).min(h - 1 - dy);
                if edge < thickness {
                    level
                } else {
                    0.05
                }
            }
            Texture::Checker { level, low, cell } => {
                let cell = cell.max(1);
                if (dx / cell + dy / cell) % 2 == 0 {
                    level
                } else {
                    low
                }
            }
        }
    }

    /// Clean `w x h` patch, row-major.
    pub fn render(&self, w: usize, h: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(w * h);
        for dy in 0..h {
            for dx in 0..w {
                out.push(self.value_at(dx, dy, w, h));
            }
        }
        out
    }
}

/// Parameters of a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub num_scenes: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    /// Inclusive `[min, max]` object count per scene.
    pub objects_per_scene: [usize; 2],
    /// Inclusive `[min, max]` object side length in pixels.
    pub object_size: [usize; 2],
    /// Texture per class, index `k - 1` for class `k`. Empty means defaults.
    #[serde(default)]
    pub textures: Vec<Texture>,
    pub seed: u64,
}

impl DatasetSpec {
    /// The "imb-std" benchmark: 64x64, 3 classes, 600 scenes (500 train / 100 eval),
    /// 1-3 objects of 8-20 px.
    pub fn imb_std() -> DatasetSpec {
        DatasetSpec {
            num_scenes: 600,
            height: 64,
            width: 64,
            num_classes: 3,
            objects_per_scene: [1, 3],
            object_size: [8, 20],
            textures: Vec::new(),
            seed: 2020,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_scenes == 0 {
            return bad("num_scenes must be positive".into());
        }
        if self.num_classes == 0 {
            return bad("num_classes must be at least 1".into());
        }
        if self.height == 0 || self.width == 0 {
            return bad("image size must be positive".into());
        }
        let [omin, omax] = self.objects_per_scene;
        if omin > omax {
            return bad(format!("objects_per_scene range [{omin}, {omax}] is empty"));
        }
        let [smin, smax] = self.object_size;
        if smin == 0 || smin > smax {
            return bad(format!("object_size range [{smin}, {smax}] is invalid"));
        }
        if smax > self.height.min(self.width) {
            return bad(format!(
                "object_size max {smax} exceeds image side {}",
                self.height.min(self.width)
            ));
        }
        if !self.textures.is_empty() && self.textures.len() != self.num_classes {
            return bad(format!(
                "{} textures given for {} classes",
                self.textures.len(),
                self.num_classes
            ));
        }
        Ok(())
    }

    pub fn texture(&self, class: usize) -> Texture {
        self.textures
            .get(class - 1)
            .copied()
            .unwrap_or_else(|| Texture::default_for_class(class))
    }

    pub fn textures_resolved(&self) -> Vec<Texture> {
        (1..=self.num_classes).map(|k| self.texture(k)).collect()
    }
}

/// One synthetic image with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub scene_id: u64,
    pub height: usize,
    pub width: usize,
    /// Row-major `[1, H, W]` intensities in `[0, 1]`.
    pub image: Vec<f64>,
    pub gt_boxes: Vec<BBox>,
    /// Class per box, in `1..=C`.
    pub gt_labels: Vec<usize>,
}

impl Scene {
    /// SHA-256 over id, size, image bits, boxes and labels.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.scene_id.to_le_bytes());
        h.update((self.height as u64).to_le_bytes());
        h.update((self.width as u64).to_le_bytes());
        for v in &self.image {
            h.update(v.to_bits().to_le_bytes());
        }
        for b in &self.gt_boxes {
            for c in [b.x1, b.y1, b.x2, b.y2] {
                h.update(c.to_bits().to_le_bytes());
            }
        }
        for &l in &self.gt_labels {
            h.update((l as u64).to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn pixel(&self, x: usize, y: usize) -> f64 {
        self.image[y * self.width + x]
    }

    /// Crops the pixel region of `b` (integer box), row-major.
    pub fn crop(&self, b: &BBox) -> Vec<f64> {
        let (x1, y1, x2, y2) = (b.x1 as usize, b.y1 as usize, b.x2 as usize, b.y2 as usize);
        let mut out = Vec::with_capacity((x2 - x1) * (y2 - y1));
        for y in y1..y2 {
            out.extend_from_slice(&self.image[y * self.width + x1..y * self.width + x2]);
        }
        out
    }
}

/// Per-scene seed; depends only on the dataset seed and the scene id.
pub fn scene_seed(seed: u64, scene_id: u64) -> u64 {
    // splitmix64 finalizer over the combined key
    let mut z = seed ^ scene_id.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generates `spec.num_scenes` scenes, ids `0..num_scenes`.
pub fn generate(spec: &DatasetSpec) -> Result<Vec<Scene>> {
    spec.validate()?;
    Ok((0..spec.num_scenes as u64)
        .map(|id| generate_scene(spec, id))
        .collect())
}

fn generate_scene(spec: &DatasetSpec, scene_id: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(scene_seed(spec.seed, scene_id));
    let (h, w) = (spec.height, spec.width);
    let mut image: Vec<f64> = (0..h * w)
        .map(|_| rng.random_range(0.0..BACKGROUND_NOISE))
        .collect();

    let [omin, omax] = spec.objects_per_scene;
    let target = rng.random_range(omin..=omax);
    let [smin, smax] = spec.object_size;
    let mut boxes: Vec<BBox> = Vec::with_capacity(target);
    let mut labels = Vec::with_capacity(target);
    for _ in 0..target {
        let mut placed = None;
        for _ in 0..PLACEMENT_TRIES {
            let bw = rng.random_range(smin..=smax);
            let bh = rng.random_range(smin..=smax);
            let x1 = rng.random_range(0..=w - bw);
            let y1 = rng.random_range(0..=h - bh);
            let cand = BBox::new(x1 as f64, y1 as f64, (x1 + bw) as f64, (y1 + bh) as f64);
            if boxes.iter().all(|b| iou(b, &cand) <= MAX_OBJECT_IOU) {
                placed = Some(cand);
                break;
            }
        }
        match placed {
            Some(b) => {
                boxes.push(b);
                labels.push(rng.random_range(1..=spec.num_classes));
            }
            None => {
                warn!(
                    "scene {scene_id}: could not place object {} of {target} after {PLACEMENT_TRIES} tries",
                    boxes.len() + 1
                );
                break;
            }
        }
    }

    for (b, &label) in boxes.iter().zip(&labels) {
        let tex = spec.texture(label);
        let (x1, y1) = (b.x1 as usize, b.y1 as usize);
        let (bw, bh) = (b.width() as usize, b.height() as usize);
        for dy in 0..bh {
            for dx in 0..bw {
                let noise = rng.random_range(-OBJECT_NOISE..OBJECT_NOISE);
                let v = (tex.value_at(dx, dy, bw, bh) + noise).clamp(0.0, 1.0);
                image[(y1 + dy) * w + x1 + dx] = v;
            }
        }
    }

    Scene {
        scene_id,
        height: h,
        width: w,
        image,
        gt_boxes: boxes,
        gt_labels: labels,
    }
}

/// Nearest clean texture (L2) for a `w x h` patch; returns the 1-based class.
pub fn classify_patch(patch: &[f64], w: usize, h: usize, textures: &[Texture]) -> usize {
    let mut best = (f64::INFINITY, 1);
    for (i, t) in textures.iter().enumerate() {
        let d: f64 = t
            .render(w, h)
            .iter()
            .zip(patch)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        if d < best.0 {
            best = (d, i + 1);
        }
    }
    best.1
}

/// Splits by scene id: the lowest `floor(n * train_fraction)` ids train, the
/// rest evaluate. Both sides are kept non-empty.
pub fn split(scenes: &[Scene], train_fraction: f64) -> Result<(Vec<Scene>, Vec<Scene>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train_fraction must be in (0, 1), got {train_fraction}"
        )));
    }
    if scenes.len() < 2 {
        return Err(Error::Config(format!(
            "cannot split {} scene(s) into two non-empty sets",
            scenes.len()
        )));
    }
    let mut sorted: Vec<Scene> = scenes.to_vec();
    sorted.sort_by_key(|s| s.scene_id);
    let n = sorted.len();
    let n_train = ((n as f64 * train_fraction).floor() as usize).clamp(1, n - 1);
    let eval = sorted.split_off(n_train);
    Ok((sorted, eval))
}

/// Dataset digest: the spec plus every scene digest in id order.
pub fn dataset_digest(spec: &DatasetSpec, scenes: &[Scene]) -> String {
    let mut h = Sha256::new();
    h.update(crate::config::canonical_json(spec).as_bytes());
    for s in scenes {
        h.update(s.digest().as_bytes());
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneEntry {
    pub scene_id: u64,
    pub image_file: String,
    pub height: usize,
    pub width: usize,
    pub gt_boxes: Vec<BBox>,
    pub gt_labels: Vec<usize>,
    pub digest: String,
}

/// On-disk dataset index.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub spec: DatasetSpec,
    pub dataset_digest: String,
    pub scenes: Vec<SceneEntry>,
}

fn image_file_name(scene_id: u64) -> String {
    format!("scenes/scene_{scene_id:05}.txt")
}

/// Writes `manifest.json` and one text image file per scene under `dir`.
pub fn write_dataset(dir: &Path, spec: &DatasetSpec, scenes: &[Scene]) -> Result<Manifest> {
    let scene_dir = dir.join("scenes");
    fs::create_dir_all(&scene_dir).map_err(|e| Error::io(&scene_dir, e))?;
    let mut entries = Vec::with_capacity(scenes.len());
    for s in scenes {
        let rel = image_file_name(s.scene_id);
        let path = dir.join(&rel);
        let mut text = String::with_capacity(s.image.len() * 20);
        for row in s.image.chunks(s.width) {
            let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            text.push_str(&line.join(" "));
            text.push('\n');
        }
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        entries.push(SceneEntry {
            scene_id: s.scene_id,
            image_file: rel,
            height: s.height,
            width: s.width,
            gt_boxes: s.gt_boxes.clone(),
            gt_labels: s.gt_labels.clone(),
            digest: s.digest(),
        });
    }
    let manifest = Manifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        spec: spec.clone(),
        dataset_digest: dataset_digest(spec, scenes),
        scenes: entries,
    };
    let path = dir.join(MANIFEST_FILE);
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::to_writer_pretty(&mut f, &manifest)?;
    f.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Reads a dataset back, verifying every scene digest.
pub fn read_dataset(dir: &Path) -> Result<(Manifest, Vec<Scene>)> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.schema_version != MANIFEST_SCHEMA_VERSION {
        return Err(Error::Config(format!(
            "unsupported manifest schema_version {}",
            manifest.schema_version
        )));
    }
    let mut scenes = Vec::with_capacity(manifest.scenes.len());
    for e in &manifest.scenes {
        let p = dir.join(&e.image_file);
        let body = fs::read_to_string(&p).map_err(|err| Error::io(&p, err))?;
        let image = body
            .split_ascii_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|err| Error::Serde(format!("{}: {err}", p.display())))?;
        if image.len() != e.height * e.width {
            return Err(Error::Serde(format!(
                "{}: expected {} values, found {}",
                p.display(),
                e.height * e.width,
                image.len()
            )));
        }
        let scene = Scene {
            scene_id: e.scene_id,
            height: e.height,
            width: e.width,
            image,
            gt_boxes: e.gt_boxes.clone(),
            gt_labels: e.gt_labels.clone(),
        };
        if scene.digest() != e.digest {
            return Err(Error::Serde(format!(
                "scene {} digest mismatch",
                e.scene_id
            )));
        }
        scenes.push(scene);
    }
    Ok((manifest, scenes))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(seed: u64) -> DatasetSpec {
        DatasetSpec {
            num_scenes: 10,
            seed,
            ..DatasetSpec::imb_std()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(&small_spec(7)).unwrap();
        let b = generate(&small_spec(7)).unwrap();
        let da: Vec<_> = a.iter().map(Scene::digest).collect();
        let db: Vec<_> = b.iter().map(Scene::digest).collect();
        assert_eq!(da, db);
        assert_ne!(da, generate(&small_spec(8)).unwrap().iter().map(Scene::digest).collect::<Vec<_>>());
    }

    #[test]
    fn empty_object_range_gives_background_scenes() {
        let spec = DatasetSpec {
            objects_per_scene: [0, 0],
            ..small_spec(1)
        };
        for s in generate(&spec).unwrap() {
            assert!(s.gt_boxes.is_empty() && s.gt_labels.is_empty());
        }
    }

    #[test]
    fn pairwise_overlap_bounded() {
        let spec = DatasetSpec {
            num_scenes: 200,
            objects_per_scene: [1, 3],
            seed: 1,
            ..DatasetSpec::imb_std()
        };
        for s in generate(&spec).unwrap() {
            for i in 0..s.gt_boxes.len() {
                for j in i + 1..s.gt_boxes.len() {
                    assert!(iou(&s.gt_boxes[i], &s.gt_boxes[j]) <= MAX_OBJECT_IOU);
                }
            }
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        let too_big = DatasetSpec {
            object_size: [8, 80],
            ..small_spec(0)
        };
        assert!(generate(&too_big).is_err());
        let no_classes = DatasetSpec {
            num_classes: 0,
            ..small_spec(0)
        };
        assert!(generate(&no_classes).is_err());
    }

    #[test]
    fn split_sizes() {
        let scenes = generate(&DatasetSpec {
            num_scenes: 100,
            ..small_spec(3)
        })
        .unwrap();
        let (tr, ev) = split(&scenes, 0.8).unwrap();
        assert_eq!((tr.len(), ev.len()), (80, 20));
        let ten = &scenes[..10];
        let (tr, ev) = split(ten, 0.999).unwrap();
        assert_eq!((tr.len(), ev.len()), (9, 1));
        let (tr2, ev2) = split(ten, 0.999).unwrap();
        assert_eq!(tr, tr2);
        assert_eq!(ev, ev2);
        assert!(split(ten, 1.0).is_err());
        assert!(split(&scenes[..1], 0.5).is_err());
    }

    #[test]
    fn default_textures_are_distinct() {
        let t: Vec<_> = (1..=6).map(Texture::default_for_class).collect();
        for i in 0..t.len() {
            for j in i + 1..t.len() {
                assert_ne!(t[i].render(10, 10), t[j].render(10, 10));
            }
        }
    }
}
