//! A tiny dense one-stage detector.
//!
//! Backbone: `channels.len()` 3x3 conv + ReLU layers, stride 2 except the
//! last, giving one detection level at stride `2^(layers - 1)`. Two heads of
//! `head_depth` 3x3 conv + ReLU layers each end in a 3x3 conv predicting
//! `A * C` classification logits (sigmoid) and `A * 4` box deltas per cell.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::anchors::{AnchorConfig, AnchorSet, ImbalanceStats};
use crate::error::{Error, Result};
use crate::losses::{optimal_bias_from_ratio, prior_bias};
use crate::scenes::Scene;
use crate::tensor::{ParamStore, Value};

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
/// Standard deviation of the final regression layer's weights.
const REG_OUT_STD: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub channels: Vec<usize>,
    pub head_depth: usize,
    pub num_classes: usize,
    pub anchors: AnchorConfig,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            channels: vec![8, 16, 16],
            head_depth: 1,
            num_classes: 3,
            anchors: AnchorConfig::default(),
        }
    }
}

impl DetectorConfig {
    pub fn stride(&self) -> usize {
        1 << self.channels.len().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        self.anchors.validate()?;
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::Config("backbone channels must be non-empty and positive".into()));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be at least 1".into()));
        }
        if self.anchors.strides != [self.stride()] {
            return Err(Error::Config(format!(
                "single-level detector has stride {}, anchors use {:?}",
                self.stride(),
                self.anchors.strides
            )));
        }
        Ok(())
    }
}

/// How the final classification bias is set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitPolicy {
    DefaultZeroBias,
    ManualPi { pi: f64 },
    OptimalBias,
}

impl InitPolicy {
    /// Final classification bias for this policy.
    pub fn bias(&self, stats: Option<&ImbalanceStats>, num_classes: usize) -> Result<f64> {
        match *self {
            InitPolicy::DefaultZeroBias => Ok(0.0),
            InitPolicy::ManualPi { pi } => {
                if !(pi > 0.0 && pi < 1.0) {
                    return Err(Error::Config(format!("prior {pi} outside (0, 1)")));
                }
                Ok(prior_bias(pi))
            }
            InitPolicy::OptimalBias => {
                let stats = stats.ok_or_else(|| {
                    Error::Config("optimal bias initialization needs imbalance statistics".into())
                })?;
                Ok(optimal_bias_from_ratio(stats.ratio, num_classes)?.1)
            }
        }
    }
}

fn conv_names(prefix: &str, i: impl std::fmt::Display) -> (String, String) {
    (format!("{prefix}.{i}.weight"), format!("{prefix}.{i}.bias"))
}

/// Seeded parameters. Only the final classification bias depends on `policy`;
/// every other tensor is drawn identically for a given seed.
pub fn init_detector(
    config: &DetectorConfig,
    policy: InitPolicy,
    stats: Option<&ImbalanceStats>,
    seed: u64,
    learning_rate: f64,
) -> Result<ParamStore> {
    config.validate()?;
    let bias = policy.bias(stats, config.num_classes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new(learning_rate)?;
    let he = |store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, i: usize, cin: usize, cout: usize| -> Result<()> {
        let fan_in = (cin * 9) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
        let w: Vec<f64> = (0..cout * cin * 9).map(|_| normal.sample(rng)).collect();
        let (wn, bn) = conv_names(prefix, i);
        store.insert(&wn, &[cout, cin, 3, 3], w)?;
        store.insert(&bn, &[cout], vec![0.0; cout])
    };
    let mut cin = 1;
    for (i, &c) in config.channels.iter().enumerate() {
        he(&mut store, &mut rng, "backbone", i, cin, c)?;
        cin = c;
    }
    let feat = cin;
    for head in ["cls_head", "reg_head"] {
        for d in 0..config.head_depth {
            he(&mut store, &mut rng, head, d, feat, feat)?;
        }
    }
    let a = config.anchors.anchors_per_location();
    let c = config.num_classes;
    store.insert("cls_head.out.weight", &[a * c, feat, 3, 3], vec![0.0; a * c * feat * 9])?;
    store.insert("cls_head.out.bias", &[a * c], vec![bias; a * c])?;
    let normal = Normal::new(0.0, REG_OUT_STD).expect("positive std");
    let w: Vec<f64> = (0..a * 4 * feat * 9).map(|_| normal.sample(&mut rng)).collect();
    store.insert("reg_head.out.weight", &[a * 4, feat, 3, 3], w)?;
    store.insert("reg_head.out.bias", &[a * 4], vec![0.0; a * 4])?;
    Ok(store)
}

/// Model outputs for a batch, rows ordered `(image, anchor)`.
#[derive(Debug, Clone)]
pub struct Outputs {
    /// `[B * N, C]` sigmoid probabilities.
    pub probs: Value,
    /// `[B * N, 4]` box deltas.
    pub deltas: Value,
}

/// Network definition bound to an image size and its anchor grid.
#[derive(Debug, Clone)]
pub struct Detector {
    pub config: DetectorConfig,
    pub anchors: AnchorSet,
    pub height: usize,
    pub width: usize,
}

impl Detector {
    pub fn new(config: DetectorConfig, height: usize, width: usize) -> Result<Detector> {
        config.validate()?;
        let anchors = config.anchors.build(height, width)?;
        let mut side = (height, width);
        for _ in 1..config.channels.len() {
            side = (side.0.div_ceil(2), side.1.div_ceil(2));
        }
        if anchors.grids != [side] {
            return Err(Error::Config(format!(
                "feature map {:?} does not match anchor grid {:?}",
                side, anchors.grids
            )));
        }
        Ok(Detector {
            config,
            anchors,
            height,
            width,
        })
    }

    pub fn num_anchors(&self) -> usize {
        self.anchors.len()
    }

    /// Stacks scene images into a `[B, 1, H, W]` constant.
    pub fn images(&self, scenes: &[&Scene]) -> Result<Value> {
        let mut data = Vec::with_capacity(scenes.len() * self.height * self.width);
        for s in scenes {
            if s.height != self.height || s.width != self.width {
                return Err(Error::shape(
                    "detector.images",
                    format!(
                        "scene {} is {}x{}, detector expects {}x{}",
                        s.scene_id, s.height, s.width, self.height, self.width
                    ),
                ));
            }
            data.extend_from_slice(&s.image);
        }
        Value::new(&[scenes.len(), 1, self.height, self.width], data)
    }

    pub fn forward(&self, store: &ParamStore, images: &Value) -> Result<Outputs> {
        let s = images.shape();
        if s.len() != 4 || s[1] != 1 || s[2] != self.height || s[3] != self.width {
            return Err(Error::shape(
                "detector.forward",
                format!("expected [B, 1, {}, {}], got {:?}", self.height, self.width, s),
            ));
        }
        let layers = self.config.channels.len();
        let mut x = images.clone();
        for i in 0..layers {
            let (wn, bn) = conv_names("backbone", i);
            let stride = if i + 1 < layers { 2 } else { 1 };
            x = x
                .conv2d(store.require(&wn)?, Some(store.require(&bn)?), stride, 1)?
                .relu();
        }
        let cls = self.head(store, &x, "cls_head", self.config.num_classes)?;
        let reg = self.head(store, &x, "reg_head", 4)?;
        Ok(Outputs {
            probs: cls.sigmoid(),
            deltas: reg,
        })
    }

    fn head(&self, store: &ParamStore, feat: &Value, prefix: &str, per_anchor: usize) -> Result<Value> {
        let mut h = feat.clone();
        for d in 0..self.config.head_depth {
            let (wn, bn) = conv_names(prefix, d);
            h = h
                .conv2d(store.require(&wn)?, Some(store.require(&bn)?), 1, 1)?
                .relu();
        }
        let (wn, bn) = conv_names(prefix, "out");
        let out = h.conv2d(store.require(&wn)?, Some(store.require(&bn)?), 1, 1)?;
        let b = out.shape()[0];
        // [B, A*K, h, w] -> [B, h, w, A*K] -> [B*h*w*A, K]
        let rows = b * self.num_anchors();
        out.permute(&[0, 2, 3, 1])?.reshape(&[rows, per_anchor])
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    file: String,
}

/// Checkpoint index: detector definition plus one text file per parameter.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub schema_version: u32,
    pub detector: DetectorConfig,
    pub height: usize,
    pub width: usize,
    pub iteration: u64,
    pub learning_rate: f64,
    /// Training-split statistics, used for adaptive thresholding.
    pub train_stats: Option<ImbalanceStats>,
    params: Vec<ParamEntry>,
}

pub fn save_checkpoint(
    dir: &Path,
    detector: &Detector,
    store: &ParamStore,
    train_stats: Option<&ImbalanceStats>,
) -> Result<()> {
    let pdir = dir.join("params");
    fs::create_dir_all(&pdir).map_err(|e| Error::io(&pdir, e))?;
    let mut params = Vec::new();
    for (name, v) in store.iter() {
        let file = format!("params/{name}.txt");
        let mut text = String::with_capacity(v.numel() * 24);
        for x in v.data() {
            text.push_str(&format!("{x}\n"));
        }
        let path = dir.join(&file);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        params.push(ParamEntry {
            name: name.to_string(),
            shape: v.shape().to_vec(),
            file,
        });
    }
    let manifest = CheckpointManifest {
        schema_version: CHECKPOINT_SCHEMA_VERSION,
        detector: detector.config.clone(),
        height: detector.height,
        width: detector.width,
        iteration: store.iteration(),
        learning_rate: store.learning_rate(),
        train_stats: train_stats.copied(),
        params,
    };
    let path = dir.join(CHECKPOINT_FILE);
    let text = serde_json::to_string_pretty(&manifest)? + "\n";
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn load_checkpoint(dir: &Path) -> Result<(CheckpointManifest, Detector, ParamStore)> {
    let path = dir.join(CHECKPOINT_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)?;
    if manifest.schema_version != CHECKPOINT_SCHEMA_VERSION {
        return Err(Error::Config(format!(
            "unsupported checkpoint schema_version {}",
            manifest.schema_version
        )));
    }
    let detector = Detector::new(manifest.detector.clone(), manifest.height, manifest.width)?;
    let mut store = ParamStore::new(manifest.learning_rate)?;
    for p in &manifest.params {
        let f = dir.join(&p.file);
        let body = fs::read_to_string(&f).map_err(|e| Error::io(&f, e))?;
        let data = body
            .split_ascii_whitespace()
            .map(str::parse::<f64>)
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Serde(format!("{}: {e}", f.display())))?;
        store.insert(&p.name, &p.shape, data)?;
    }
    store.set_iteration(manifest.iteration);
    Ok((manifest, detector, store))
}
