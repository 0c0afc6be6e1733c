//! Dense anchor grids, ground-truth assignment and imbalance statistics.

mod boxes;

pub use boxes::{iou, BBox};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenes::Scene;

/// Upper bound on predicted log size ratios before `exp`.
pub const MAX_LOG_SIZE_RATIO: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

/// Label of an anchor that is neither foreground nor background.
pub const IGNORE: i32 = -1;
pub const BACKGROUND: i32 = 0;

/// Anchor layout and assignment thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorConfig {
    pub strides: Vec<usize>,
    /// Anchor side lengths in pixels (square root of area).
    pub scales: Vec<f64>,
    /// Height / width ratios.
    pub aspect_ratios: Vec<f64>,
    pub fg_thresh: f64,
    pub bg_thresh: f64,
    /// Count ignore-band anchors in `N` for the imbalance statistics.
    #[serde(default = "default_true")]
    pub ignore_in_n: bool,
    /// Per-coordinate multipliers on the encoded deltas the network regresses.
    #[serde(default = "default_delta_weights")]
    pub delta_weights: [f64; 4],
}

fn default_true() -> bool {
    true
}

fn default_delta_weights() -> [f64; 4] {
    [10.0, 10.0, 5.0, 5.0]
}

impl Default for AnchorConfig {
    /// Single stride-4 level with 3 sizes x 3 ratios.
    fn default() -> Self {
        AnchorConfig {
            strides: vec![4],
            scales: vec![8.0, 12.0, 18.0],
            aspect_ratios: vec![0.5, 1.0, 2.0],
            fg_thresh: 0.5,
            bg_thresh: 0.4,
            ignore_in_n: true,
            delta_weights: default_delta_weights(),
        }
    }
}

impl AnchorConfig {
    pub fn anchors_per_location(&self) -> usize {
        self.scales.len() * self.aspect_ratios.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.strides.is_empty() || self.scales.is_empty() || self.aspect_ratios.is_empty() {
            return Err(Error::Config("anchor strides, scales and ratios must be non-empty".into()));
        }
        if self.strides.contains(&0) || self.scales.iter().chain(&self.aspect_ratios).any(|&v| !(v > 0.0)) {
            return Err(Error::Config("anchor strides, scales and ratios must be positive".into()));
        }
        if self.delta_weights.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::Config("delta_weights must be positive".into()));
        }
        if !(self.fg_thresh >= self.bg_thresh) {
            return Err(Error::Config(format!(
                "fg_thresh {} below bg_thresh {}",
                self.fg_thresh, self.bg_thresh
            )));
        }
        Ok(())
    }

    pub fn build(&self, height: usize, width: usize) -> Result<AnchorSet> {
        build_anchors(height, width, &self.strides, &self.scales, &self.aspect_ratios)
    }
}

/// All anchors of an image, ordered by stride level, then row-major grid
/// cell, then shape (`scale_index * ratios + ratio_index`).
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    pub anchors: Vec<BBox>,
    pub strides: Vec<usize>,
    pub scales: Vec<f64>,
    pub aspect_ratios: Vec<f64>,
    /// `(rows, cols)` of each stride level.
    pub grids: Vec<(usize, usize)>,
}

impl AnchorSet {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn per_location(&self) -> usize {
        self.scales.len() * self.aspect_ratios.len()
    }
}

pub fn build_anchors(
    height: usize,
    width: usize,
    strides: &[usize],
    scales: &[f64],
    aspect_ratios: &[f64],
) -> Result<AnchorSet> {
    if strides.is_empty() || scales.is_empty() || aspect_ratios.is_empty() {
        return Err(Error::Config("anchor strides, scales and ratios must be non-empty".into()));
    }
    let max_stride = *strides.iter().max().expect("non-empty");
    if max_stride == 0 || height < max_stride || width < max_stride {
        return Err(Error::Config(format!(
            "image {height}x{width} smaller than stride {max_stride}"
        )));
    }
    let mut shapes = Vec::with_capacity(scales.len() * aspect_ratios.len());
    for &s in scales {
        for &r in aspect_ratios {
            let w = s / r.sqrt();
            let h = s * r.sqrt();
            shapes.push((w, h));
        }
    }
    let mut anchors = Vec::new();
    let mut grids = Vec::with_capacity(strides.len());
    for &stride in strides {
        let rows = height.div_ceil(stride);
        let cols = width.div_ceil(stride);
        grids.push((rows, cols));
        for gy in 0..rows {
            for gx in 0..cols {
                let cx = (gx as f64 + 0.5) * stride as f64;
                let cy = (gy as f64 + 0.5) * stride as f64;
                for &(w, h) in &shapes {
                    anchors.push(BBox::from_center(cx, cy, w, h));
                }
            }
        }
    }
    Ok(AnchorSet {
        anchors,
        strides: strides.to_vec(),
        scales: scales.to_vec(),
        aspect_ratios: aspect_ratios.to_vec(),
        grids,
    })
}

/// `(dcx / wa, dcy / ha, ln(wg / wa), ln(hg / ha))`.
pub fn encode(gt: &BBox, anchor: &BBox) -> [f64; 4] {
    let (gcx, gcy) = gt.center();
    let (acx, acy) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    [
        (gcx - acx) / aw,
        (gcy - acy) / ah,
        (gt.width() / aw).ln(),
        (gt.height() / ah).ln(),
    ]
}

/// Inverse of [`encode`]; size deltas are clamped to [`MAX_LOG_SIZE_RATIO`].
pub fn decode(deltas: &[f64], anchor: &BBox) -> BBox {
    let (acx, acy) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    let cx = acx + deltas[0] * aw;
    let cy = acy + deltas[1] * ah;
    let w = aw * deltas[2].min(MAX_LOG_SIZE_RATIO).exp();
    let h = ah * deltas[3].min(MAX_LOG_SIZE_RATIO).exp();
    BBox::from_center(cx, cy, w, h)
}

/// Per-anchor assignment of one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// `-1` ignore, `0` background, `1..=C` foreground class.
    pub labels: Vec<i32>,
    /// Matched ground-truth index for foreground anchors.
    pub matched_gt: Vec<Option<usize>>,
    /// Foreground anchor indices in increasing order.
    pub fg_indices: Vec<usize>,
    /// Encoded targets, parallel to `fg_indices`.
    pub regression_targets: Vec<[f64; 4]>,
    pub n: usize,
    pub n_fg: usize,
}

impl MatchResult {
    pub fn n_background(&self) -> usize {
        self.labels.iter().filter(|&&l| l == BACKGROUND).count()
    }

    pub fn n_ignore(&self) -> usize {
        self.labels.iter().filter(|&&l| l == IGNORE).count()
    }
}

/// Assigns anchors to ground truth.
///
/// Max-IoU at or above `fg_thresh` is foreground with the argmax box's label;
/// below `bg_thresh` is background; anything between is ignored. Then every
/// box with a positive best IoU claims its best anchor as foreground. Boxes
/// claim in order of decreasing best IoU (then index); a box whose best
/// anchor was already claimed takes its best unclaimed one. Ties go to the
/// lowest index throughout.
pub fn match_anchors(
    anchors: &AnchorSet,
    scene: &Scene,
    fg_thresh: f64,
    bg_thresh: f64,
) -> Result<MatchResult> {
    if !(fg_thresh >= bg_thresh) {
        return Err(Error::Config(format!(
            "fg_thresh {fg_thresh} below bg_thresh {bg_thresh}"
        )));
    }
    let n = anchors.len();
    let g = scene.gt_boxes.len();
    let mut labels = vec![BACKGROUND; n];
    let mut matched_gt = vec![None; n];

    if g > 0 {
        // iou[i * g + j]
        let mut ious = vec![0.0; n * g];
        for (i, a) in anchors.anchors.iter().enumerate() {
            for (j, b) in scene.gt_boxes.iter().enumerate() {
                ious[i * g + j] = iou(a, b);
            }
        }
        for i in 0..n {
            let row = &ious[i * g..(i + 1) * g];
            let (mut best_j, mut best) = (0, row[0]);
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > best {
                    best = v;
                    best_j = j;
                }
            }
            if best >= fg_thresh {
                labels[i] = scene.gt_labels[best_j] as i32;
                matched_gt[i] = Some(best_j);
            } else if best >= bg_thresh {
                labels[i] = IGNORE;
            }
        }

        let best_of = |j: usize, taken: &[bool]| -> Option<(usize, f64)> {
            let mut out: Option<(usize, f64)> = None;
            for i in 0..n {
                let v = ious[i * g + j];
                if v > 0.0 && !taken[i] && out.is_none_or(|(_, b)| v > b) {
                    out = Some((i, v));
                }
            }
            out
        };
        let none_taken = vec![false; n];
        let mut order: Vec<(usize, f64)> = (0..g)
            .map(|j| (j, best_of(j, &none_taken).map_or(0.0, |(_, v)| v)))
            .collect();
        order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let mut claimed = vec![false; n];
        for (j, _) in order {
            if let Some((i, _)) = best_of(j, &claimed) {
                claimed[i] = true;
                labels[i] = scene.gt_labels[j] as i32;
                matched_gt[i] = Some(j);
            }
        }
    }

    let fg_indices: Vec<usize> = (0..n).filter(|&i| labels[i] >= 1).collect();
    let regression_targets = fg_indices
        .iter()
        .map(|&i| encode(&scene.gt_boxes[matched_gt[i].expect("foreground has a match")], &anchors.anchors[i]))
        .collect();
    let n_fg = fg_indices.len();
    for (i, m) in matched_gt.iter_mut().enumerate() {
        if labels[i] < 1 {
            *m = None;
        }
    }
    Ok(MatchResult {
        labels,
        matched_gt,
        fg_indices,
        regression_targets,
        n,
        n_fg,
    })
}

/// Dataset-level anchor counts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImbalanceStats {
    pub n_total: u64,
    pub n_fg_total: u64,
    pub n_ignore_total: u64,
    /// `n_total / n_fg_total`.
    pub ratio: f64,
}

impl ImbalanceStats {
    /// Foreground-to-all ratio `N_f / N`, the adaptive inference threshold.
    pub fn fg_fraction(&self) -> f64 {
        self.n_fg_total as f64 / self.n_total as f64
    }

    pub fn from_counts(n_total: u64, n_fg_total: u64, n_ignore_total: u64) -> Result<ImbalanceStats> {
        if n_fg_total == 0 {
            return Err(Error::Degenerate(
                "no foreground anchors in the dataset; N/N_f is undefined".into(),
            ));
        }
        Ok(ImbalanceStats {
            n_total,
            n_fg_total,
            n_ignore_total,
            ratio: n_total as f64 / n_fg_total as f64,
        })
    }

    pub fn from_matches<'a>(
        matches: impl IntoIterator<Item = &'a MatchResult>,
        ignore_in_n: bool,
    ) -> Result<ImbalanceStats> {
        let (mut n, mut nf, mut ni) = (0u64, 0u64, 0u64);
        for m in matches {
            let ign = m.n_ignore() as u64;
            n += m.n as u64 - if ignore_in_n { 0 } else { ign };
            nf += m.n_fg as u64;
            ni += ign;
        }
        if n == 0 {
            return Err(Error::Degenerate("empty dataset".into()));
        }
        ImbalanceStats::from_counts(n, nf, ni)
    }
}

/// Sums `N` and `N_f` over every scene, in the order given.
pub fn imbalance_stats(
    scenes: &[Scene],
    anchors: &AnchorSet,
    fg_thresh: f64,
    bg_thresh: f64,
    ignore_in_n: bool,
) -> Result<ImbalanceStats> {
    if scenes.is_empty() {
        return Err(Error::Degenerate("empty dataset".into()));
    }
    let matches = scenes
        .iter()
        .map(|s| match_anchors(anchors, s, fg_thresh, bg_thresh))
        .collect::<Result<Vec<_>>>()?;
    ImbalanceStats::from_matches(&matches, ignore_in_n)
}
