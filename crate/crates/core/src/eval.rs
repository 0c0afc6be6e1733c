//! Inference and COCO-style average precision.

use std::cmp::Ordering;
use std::io::Write;
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};

use crate::anchors::{decode, iou, BBox, ImbalanceStats};
use crate::detector::Detector;
use crate::error::{Error, Result};
use crate::scenes::Scene;
use crate::tensor::ParamStore;

/// Scenes per forward pass during inference.
const INFER_BATCH: usize = 8;
/// Recall points of the interpolated precision curve.
pub const RECALL_POINTS: usize = 101;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ThresholdPolicy {
    Fixed { theta: f64 },
    /// `theta = N_f / N` of the training split.
    Adaptive,
}

impl ThresholdPolicy {
    pub fn resolve(&self, train_stats: Option<&ImbalanceStats>) -> Result<f64> {
        match *self {
            ThresholdPolicy::Fixed { theta } => check_theta(theta).map(|_| theta),
            ThresholdPolicy::Adaptive => train_stats
                .map(ImbalanceStats::fg_fraction)
                .ok_or_else(|| Error::Config("adaptive threshold needs training-split statistics".into())),
        }
    }

    pub fn label(&self) -> String {
        match self {
            ThresholdPolicy::Fixed { theta } => format!("{theta}"),
            ThresholdPolicy::Adaptive => "adaptive".into(),
        }
    }
}

fn check_theta(theta: f64) -> Result<()> {
    if (0.0..1.0).contains(&theta) {
        Ok(())
    } else {
        Err(Error::Config(format!("threshold {theta} outside [0, 1)")))
    }
}

pub fn coco_iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub threshold: ThresholdPolicy,
    #[serde(default = "default_nms_iou")]
    pub nms_iou: f64,
    #[serde(default = "default_max_detections")]
    pub max_detections: usize,
    #[serde(default = "coco_iou_thresholds")]
    pub ap_iou_thresholds: Vec<f64>,
}

fn default_nms_iou() -> f64 {
    0.5
}

fn default_max_detections() -> usize {
    100
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            threshold: ThresholdPolicy::Adaptive,
            nms_iou: default_nms_iou(),
            max_detections: default_max_detections(),
            ap_iou_thresholds: coco_iou_thresholds(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if let ThresholdPolicy::Fixed { theta } = self.threshold {
            check_theta(theta)?;
        }
        if !(0.0..=1.0).contains(&self.nms_iou) {
            return Err(Error::Config(format!("nms_iou {} outside [0, 1]", self.nms_iou)));
        }
        if self.max_detections == 0 {
            return Err(Error::Config("max_detections must be at least 1".into()));
        }
        if self.ap_iou_thresholds.is_empty()
            || self.ap_iou_thresholds.iter().any(|t| !(*t > 0.0 && *t <= 1.0))
        {
            return Err(Error::Config("ap_iou_thresholds must be non-empty values in (0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    /// Class in `1..=C`.
    pub class: usize,
    pub score: f64,
}

/// Keeps every `(anchor, class)` pair with `p >= theta`, decoding and clipping
/// its box. Output is in anchor-major, class-minor order.
pub fn decode_and_filter(
    probs: &[f64],
    deltas: &[f64],
    anchors: &[BBox],
    num_classes: usize,
    theta: f64,
    width: f64,
    height: f64,
) -> Vec<Detection> {
    let mut out = Vec::new();
    for (a, anchor) in anchors.iter().enumerate() {
        let row = &probs[a * num_classes..(a + 1) * num_classes];
        if row.iter().all(|&p| p < theta) {
            continue;
        }
        let bbox = decode(&deltas[a * 4..a * 4 + 4], anchor).clip(width, height);
        for (k, &p) in row.iter().enumerate() {
            if p >= theta {
                out.push(Detection {
                    bbox,
                    class: k + 1,
                    score: p,
                });
            }
        }
    }
    out
}

/// Indices of `dets` sorted by descending score, ties by lower index.
fn score_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .partial_cmp(&dets[a].score)
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

/// Greedy per-class NMS, stopping once `limit` boxes of a class are kept.
fn nms_limited(dets: &[Detection], iou_threshold: f64, limit: usize) -> Vec<Detection> {
    let mut kept: Vec<usize> = Vec::new();
    let mut per_class: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for i in score_order(dets) {
        let d = &dets[i];
        let same = per_class.entry(d.class).or_default();
        if same.len() >= limit {
            continue;
        }
        if same.iter().all(|&j| iou(&dets[j].bbox, &d.bbox) <= iou_threshold) {
            same.push(i);
            kept.push(i);
        }
    }
    kept.into_iter().map(|i| dets[i]).collect()
}

/// Greedy per-class non-maximum suppression: walking in descending score
/// (ties by lower index), a box is dropped when its IoU with an already kept
/// box of the same class exceeds `iou_threshold`. Output is score-descending.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    nms_limited(dets, iou_threshold, usize::MAX)
}

/// Raw network outputs for one scene.
#[derive(Debug, Clone)]
pub struct SceneOutputs {
    pub scene_id: u64,
    pub probs: Vec<f64>,
    pub deltas: Vec<f64>,
}

/// Forward passes over `scenes` with gradients disabled.
pub fn infer(detector: &Detector, store: &ParamStore, scenes: &[Scene]) -> Result<Vec<SceneOutputs>> {
    let frozen = store.frozen();
    let n = detector.num_anchors();
    let c = detector.config.num_classes;
    let mut out = Vec::with_capacity(scenes.len());
    for chunk in scenes.chunks(INFER_BATCH) {
        let refs: Vec<&Scene> = chunk.iter().collect();
        let o = detector.forward(&frozen, &detector.images(&refs)?)?;
        for (b, s) in chunk.iter().enumerate() {
            out.push(SceneOutputs {
                scene_id: s.scene_id,
                probs: o.probs.data()[b * n * c..(b + 1) * n * c].to_vec(),
                deltas: o.deltas.data()[b * n * 4..(b + 1) * n * 4].to_vec(),
            });
        }
    }
    Ok(out)
}

/// Final detections of one scene.
#[derive(Debug, Clone)]
pub struct SceneDetections {
    pub scene_id: u64,
    /// Candidates passing the score threshold, before NMS.
    pub survivors: usize,
    pub detections: Vec<Detection>,
}

/// Threshold, NMS, then the top `max_detections` by score.
pub fn postprocess(
    detector: &Detector,
    outputs: &SceneOutputs,
    theta: f64,
    config: &EvalConfig,
) -> SceneDetections {
    let dw = detector.config.anchors.delta_weights;
    let deltas: Vec<f64> = outputs
        .deltas
        .chunks(4)
        .flat_map(|d| (0..4).map(move |i| d[i] / dw[i]))
        .collect();
    let raw = decode_and_filter(
        &outputs.probs,
        &deltas,
        &detector.anchors.anchors,
        detector.config.num_classes,
        theta,
        detector.width as f64,
        detector.height as f64,
    );
    // A class never contributes more than `max_detections` to the final cut.
    let mut dets = nms_limited(&raw, config.nms_iou, config.max_detections);
    dets.truncate(config.max_detections);
    SceneDetections {
        scene_id: outputs.scene_id,
        survivors: raw.len(),
        detections: dets,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class: usize,
    /// AP at each IoU threshold, in [0, 1].
    pub ap: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub theta: f64,
    pub iou_thresholds: Vec<f64>,
    pub per_class: Vec<ClassAp>,
    /// Classes without ground truth in the evaluated scenes.
    pub excluded_classes: Vec<usize>,
    /// Mean over classes and IoU thresholds.
    pub ap: f64,
    pub ap50: Option<f64>,
    pub ap75: Option<f64>,
    pub survivors: usize,
    pub detections: usize,
    pub num_scenes: usize,
    pub ms_per_scene: f64,
}

impl EvalReport {
    /// Mean AP across classes at the IoU threshold closest to `t`, if one is within 1e-9.
    pub fn ap_at(&self, t: f64) -> Option<f64> {
        let i = self.iou_thresholds.iter().position(|x| (x - t).abs() < 1e-9)?;
        Some(mean(self.per_class.iter().map(|c| c.ap[i])))
    }

    /// JSON with the wall-time field zeroed, for byte comparisons.
    pub fn to_json_untimed(&self) -> Result<String> {
        let mut r = self.clone();
        r.ms_per_scene = 0.0;
        Ok(serde_json::to_string_pretty(&r)?)
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// 101-point interpolated AP from score-ordered true/false positive flags.
pub fn interpolated_ap(tp: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut recall = Vec::with_capacity(tp.len());
    let mut precision = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        hits += t as usize;
        recall.push(hits as f64 / num_gt as f64);
        precision.push(hits as f64 / (i + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut total = 0.0;
    for k in 0..RECALL_POINTS {
        let r = k as f64 / (RECALL_POINTS - 1) as f64;
        let i = recall.partition_point(|&x| x < r);
        if i < precision.len() {
            total += precision[i];
        }
    }
    total / RECALL_POINTS as f64
}

/// AP of one class at one IoU threshold. `dets[s]` and `gts[s]` belong to the
/// same scene; detections are matched greedily in descending score (ties by
/// scene, then position), each to the unmatched ground truth of highest IoU.
fn class_ap(dets: &[Vec<&Detection>], gts: &[Vec<BBox>], iou_threshold: f64) -> f64 {
    let num_gt: usize = gts.iter().map(Vec::len).sum();
    let mut ranked: Vec<(usize, usize)> = dets
        .iter()
        .enumerate()
        .flat_map(|(s, d)| (0..d.len()).map(move |j| (s, j)))
        .collect();
    ranked.sort_by(|&(sa, ja), &(sb, jb)| {
        dets[sb][jb]
            .score
            .partial_cmp(&dets[sa][ja].score)
            .unwrap_or(Ordering::Equal)
            .then((sa, ja).cmp(&(sb, jb)))
    });
    let mut taken: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = Vec::with_capacity(ranked.len());
    for (s, j) in ranked {
        let d = dets[s][j];
        let mut best: Option<(usize, f64)> = None;
        for (g, gb) in gts[s].iter().enumerate() {
            if taken[s][g] {
                continue;
            }
            let o = iou(&d.bbox, gb);
            if o >= iou_threshold && best.is_none_or(|(_, b)| o > b) {
                best = Some((g, o));
            }
        }
        match best {
            Some((g, _)) => {
                taken[s][g] = true;
                tp.push(true);
            }
            None => tp.push(false),
        }
    }
    interpolated_ap(&tp, num_gt)
}

/// COCO-style AP of `detections` against the ground truth of `scenes`
/// (matched by position). Classes absent from the ground truth are excluded
/// from the mean.
pub fn evaluate(
    scenes: &[Scene],
    detections: &[SceneDetections],
    num_classes: usize,
    theta: f64,
    iou_thresholds: &[f64],
) -> Result<EvalReport> {
    if scenes.is_empty() {
        return Err(Error::Config("evaluation split is empty".into()));
    }
    if scenes.len() != detections.len() {
        return Err(Error::Config(format!(
            "{} scenes but {} detection sets",
            scenes.len(),
            detections.len()
        )));
    }
    let mut per_class = Vec::new();
    let mut excluded = Vec::new();
    for class in 1..=num_classes {
        let gts: Vec<Vec<BBox>> = scenes
            .iter()
            .map(|s| {
                s.gt_boxes
                    .iter()
                    .zip(&s.gt_labels)
                    .filter(|(_, &l)| l == class)
                    .map(|(b, _)| *b)
                    .collect()
            })
            .collect();
        if gts.iter().all(Vec::is_empty) {
            info!("class {class} has no ground truth; excluded from AP");
            excluded.push(class);
            continue;
        }
        let dets: Vec<Vec<&Detection>> = detections
            .iter()
            .map(|sd| sd.detections.iter().filter(|d| d.class == class).collect())
            .collect();
        let ap = iou_thresholds.iter().map(|&t| class_ap(&dets, &gts, t)).collect();
        per_class.push(ClassAp { class, ap });
    }
    let mut report = EvalReport {
        theta,
        iou_thresholds: iou_thresholds.to_vec(),
        ap: mean(per_class.iter().flat_map(|c| c.ap.iter().copied())),
        per_class,
        excluded_classes: excluded,
        ap50: None,
        ap75: None,
        survivors: detections.iter().map(|d| d.survivors).sum(),
        detections: detections.iter().map(|d| d.detections.len()).sum(),
        num_scenes: scenes.len(),
        ms_per_scene: 0.0,
    };
    report.ap50 = report.ap_at(0.5);
    report.ap75 = report.ap_at(0.75);
    Ok(report)
}

/// Full pipeline for one threshold policy: inference, post-processing, AP.
pub fn evaluate_model(
    detector: &Detector,
    store: &ParamStore,
    scenes: &[Scene],
    train_stats: Option<&ImbalanceStats>,
    config: &EvalConfig,
) -> Result<EvalReport> {
    config.validate()?;
    let theta = config.threshold.resolve(train_stats)?;
    let start = Instant::now();
    let outputs = infer(detector, store, scenes)?;
    let dets: Vec<SceneDetections> = outputs
        .iter()
        .map(|o| postprocess(detector, o, theta, config))
        .collect();
    let ms = start.elapsed().as_secs_f64() * 1e3 / scenes.len().max(1) as f64;
    let mut report = evaluate(
        scenes,
        &dets,
        detector.config.num_classes,
        theta,
        &config.ap_iou_thresholds,
    )?;
    report.ms_per_scene = ms;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    /// `adaptive` or the fixed threshold.
    pub policy: String,
    pub theta: f64,
    pub ap: f64,
    pub ap50: Option<f64>,
    pub ap75: Option<f64>,
    pub survivors: usize,
    pub ms_per_scene: f64,
}

impl SweepRow {
    pub const CSV_HEADER: [&'static str; 7] =
        ["policy", "theta", "ap", "ap50", "ap75", "survivors", "ms_per_scene"];
}

/// One report per policy. Inference runs once; thresholds only change
/// post-processing. `ms_per_scene` is the shared inference time plus the
/// policy's own post-processing time.
pub fn threshold_sweep(
    detector: &Detector,
    store: &ParamStore,
    scenes: &[Scene],
    train_stats: Option<&ImbalanceStats>,
    policies: &[ThresholdPolicy],
    config: &EvalConfig,
) -> Result<Vec<(ThresholdPolicy, EvalReport)>> {
    config.validate()?;
    let start = Instant::now();
    let outputs = infer(detector, store, scenes)?;
    let infer_ms = start.elapsed().as_secs_f64() * 1e3;
    let mut out = Vec::with_capacity(policies.len());
    for policy in policies {
        let theta = policy.resolve(train_stats)?;
        let start = Instant::now();
        let cfg = EvalConfig {
            threshold: *policy,
            ..config.clone()
        };
        let dets: Vec<SceneDetections> = outputs
            .iter()
            .map(|o| postprocess(detector, o, theta, &cfg))
            .collect();
        let post_ms = start.elapsed().as_secs_f64() * 1e3;
        let mut report = evaluate(
            scenes,
            &dets,
            detector.config.num_classes,
            theta,
            &config.ap_iou_thresholds,
        )?;
        report.ms_per_scene = (infer_ms + post_ms) / scenes.len().max(1) as f64;
        out.push((*policy, report));
    }
    Ok(out)
}

pub fn sweep_rows(sweep: &[(ThresholdPolicy, EvalReport)]) -> Vec<SweepRow> {
    sweep
        .iter()
        .map(|(p, r)| SweepRow {
            policy: p.label(),
            theta: r.theta,
            ap: r.ap,
            ap50: r.ap50,
            ap75: r.ap75,
            survivors: r.survivors,
            ms_per_scene: r.ms_per_scene,
        })
        .collect()
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SweepRow::CSV_HEADER)?;
    for r in rows {
        let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        w.write_record([
            r.policy.clone(),
            r.theta.to_string(),
            r.ap.to_string(),
            opt(r.ap50),
            opt(r.ap75),
            r.survivors.to_string(),
            format!("{:.3}", r.ms_per_scene),
        ])?;
    }
    w.flush().map_err(|e| Error::Serde(e.to_string()))
}
