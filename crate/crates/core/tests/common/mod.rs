//! Independent reference implementations used by the integration suites.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use samplefree::anchors::{BBox, MatchResult};
use samplefree::eval::{Detection, SceneDetections};
use samplefree::losses::{ce_loss, focal_loss, ghmc_loss, smooth_l1_reg_loss, total_loss, ClsBatch, GhmNormalizer, GhmState, LossConfig};
use samplefree::scenes::Scene;
use samplefree::tensor::{backward, Value};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Largest relative error between the autodiff gradient of `f` at `x` and
/// central differences of `g` (usually `g == f`).
pub fn max_grad_err(shape: &[usize], x: &[f64], f: &dyn Fn(&Value) -> Value, g: &dyn Fn(&Value) -> f64) -> f64 {
    let p = Value::param(shape, x.to_vec()).unwrap();
    let grads = backward(&f(&p)).unwrap();
    let analytic = grads.get(&p).expect("gradient present").to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let at = |d: f64| {
            let mut v = x.to_vec();
            v[i] += d;
            g(&Value::new(shape, v).unwrap())
        };
        let numeric = (at(FD_STEP) - at(-FD_STEP)) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(analytic[i], numeric));
    }
    worst
}

/// Initial weighted cross-entropy with every prediction at `pi`, written
/// straight from the per-unit sum: one positive unit per foreground anchor
/// and `ratio * C - 1` negative units.
pub fn ce_initial(pi: f64, ratio: f64, c: usize, w: f64) -> f64 {
    let negatives = ratio * c as f64 - 1.0;
    w * (-(pi.ln()) - negatives * (1.0 - pi).ln())
}

/// Minimizer of [`ce_initial`] over `points` log-spaced priors in
/// `[lo, hi]`, and the log-step of the grid.
pub fn grid_search_pi(ratio: f64, c: usize, points: usize, lo: f64, hi: f64) -> (f64, f64) {
    let (a, b) = (lo.ln(), hi.ln());
    let step = (b - a) / (points - 1) as f64;
    let mut best = (f64::INFINITY, lo);
    for k in 0..points {
        let pi = (a + step * k as f64).exp();
        let l = ce_initial(pi, ratio, c, 1.0);
        if l < best.0 {
            best = (l, pi);
        }
    }
    (best.1, step)
}

pub fn iou_ref(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// `(bbox, class, score)` triples.
pub type Det = (BBox, usize, f64);

/// NMS by its fixed-point definition: box `i` survives iff no surviving box
/// of the same class with higher priority overlaps it above `thr`. Priority is
/// score, then lower index. Resolved by repeated passes over all pairs.
pub fn nms_ref(dets: &[Det], thr: f64) -> Vec<usize> {
    let n = dets.len();
    let beats = |j: usize, i: usize| dets[j].2 > dets[i].2 || (dets[j].2 == dets[i].2 && j < i);
    let mut state: Vec<Option<bool>> = vec![None; n];
    loop {
        let mut changed = false;
        for i in 0..n {
            if state[i].is_some() {
                continue;
            }
            let rivals: Vec<usize> = (0..n)
                .filter(|&j| j != i && dets[j].1 == dets[i].1 && beats(j, i) && iou_ref(&dets[j].0, &dets[i].0) > thr)
                .collect();
            if rivals.iter().any(|&j| state[j] == Some(true)) {
                state[i] = Some(false);
                changed = true;
            } else if rivals.iter().all(|&j| state[j] == Some(false)) {
                state[i] = Some(true);
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    let mut kept: Vec<usize> = (0..n).filter(|&i| state[i] == Some(true)).collect();
    kept.sort_by(|&a, &b| dets[b].2.partial_cmp(&dets[a].2).unwrap().then(a.cmp(&b)));
    kept
}

/// 101-point AP of one class at one IoU threshold over several scenes.
/// `dets[s]` are `(bbox, score)` in scene `s`, `gts[s]` its boxes.
///
/// Detections are ranked by score (ties by scene, then position). Each in
/// turn takes the untaken ground truth with the highest IoU at or above
/// `thr` (ties to the lower index). Precision at recall level `r` is the
/// best precision at any rank whose recall reaches `r`.
pub fn ap_ref(dets: &[Vec<(BBox, f64)>], gts: &[Vec<BBox>], thr: f64) -> f64 {
    let num_gt: usize = gts.iter().map(Vec::len).sum();
    if num_gt == 0 {
        return 0.0;
    }
    let mut all: Vec<(usize, usize)> = Vec::new();
    for (s, d) in dets.iter().enumerate() {
        for j in 0..d.len() {
            all.push((s, j));
        }
    }
    all.sort_by(|&(sa, ja), &(sb, jb)| {
        dets[sb][jb].1.partial_cmp(&dets[sa][ja].1).unwrap().then((sa, ja).cmp(&(sb, jb)))
    });
    let mut taken: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut curve: Vec<(f64, f64)> = Vec::new();
    let mut tp = 0usize;
    for (rank, &(s, j)) in all.iter().enumerate() {
        let mut best: Option<usize> = None;
        let mut best_iou = thr;
        for g in 0..gts[s].len() {
            if taken[s][g] {
                continue;
            }
            let o = iou_ref(&dets[s][j].0, &gts[s][g]);
            if o >= best_iou && best.map_or(true, |_| o > best_iou) {
                best = Some(g);
                best_iou = o;
            }
        }
        if let Some(g) = best {
            taken[s][g] = true;
            tp += 1;
        }
        curve.push((tp as f64 / num_gt as f64, tp as f64 / (rank + 1) as f64));
    }
    let mut total = 0.0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        let p = curve
            .iter()
            .filter(|(rec, _)| *rec >= r)
            .map(|(_, p)| *p)
            .fold(0.0, f64::max);
        total += p;
    }
    total / 101.0
}

/// OHEM reference: full stable sort by descending loss (NaN last), first `k`.
pub fn ohem_ref(losses: &[f64], k: usize) -> Vec<usize> {
    let key = |x: f64| if x.is_nan() { f64::NEG_INFINITY } else { x };
    let mut idx: Vec<usize> = (0..losses.len()).collect();
    for i in 1..idx.len() {
        let mut j = i;
        while j > 0 && key(losses[idx[j - 1]]) < key(losses[idx[j]]) {
            idx.swap(j - 1, j);
            j -= 1;
        }
    }
    idx.truncate(k.min(losses.len()));
    idx
}

/// Random logits `[n, c]` with labels in `-1..=c`, at least one foreground.
pub struct RandBatch {
    pub n: usize,
    pub c: usize,
    pub logits: Vec<f64>,
    pub labels: Vec<i32>,
}

pub fn rand_batch(seed: u64) -> RandBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(4..16);
    let c = rng.random_range(1..4);
    let logits = (0..n * c).map(|_| rng.random_range(-4.0..4.0)).collect();
    let mut labels: Vec<i32> = (0..n).map(|_| rng.random_range(-1..=c as i32)).collect();
    labels[0] = rng.random_range(1..=c as i32);
    RandBatch { n, c, logits, labels }
}

pub fn rand_reg(seed: u64, beta: f64) -> (usize, Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
    let n = rng.random_range(1..10);
    let target: Vec<f64> = (0..n * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
    let pred = target
        .iter()
        .map(|t| {
            // differences away from the kinks at 0 and +-beta
            let mag = if rng.random_bool(0.5) {
                rng.random_range(0.1 * beta..0.9 * beta)
            } else {
                rng.random_range(1.1 * beta..2.0)
            };
            t + if rng.random_bool(0.5) { mag } else { -mag }
        })
        .collect();
    (n, pred, target)
}

pub fn rand_match(rng: &mut ChaCha8Rng) -> MatchResult {
    let n = rng.random_range(1..300);
    let labels: Vec<i32> = (0..n)
        .map(|_| match rng.random_range(0..10) {
            0 => -1,
            1 | 2 => rng.random_range(1..4),
            _ => 0,
        })
        .collect();
    let fg_indices: Vec<usize> = (0..n).filter(|&i| labels[i] >= 1).collect();
    MatchResult {
        matched_gt: labels.iter().map(|&l| (l >= 1).then_some(0)).collect(),
        regression_targets: vec![[0.0; 4]; fg_indices.len()],
        n_fg: fg_indices.len(),
        fg_indices,
        labels,
        n,
    }
}

/// Units with `|p - y|` spread evenly across every bin, `per_bin` in each.
pub fn uniform_batch(bins: usize, per_bin: usize, rng: &mut ChaCha8Rng) -> ClsBatch {
    let n = bins * per_bin;
    let mut probs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for k in 0..n {
        let b = k % bins;
        let g = (b as f64 + rng.random_range(0.1..0.9)) / bins as f64;
        if rng.random_bool(0.3) {
            labels.push(1);
            probs.push(1.0 - g);
        } else {
            labels.push(0);
            probs.push(g);
        }
    }
    ClsBatch::new(Value::new(&[n, 1], probs).unwrap(), labels).unwrap()
}

pub fn rand_box(rng: &mut ChaCha8Rng, extent: f64) -> BBox {
    let w = rng.random_range(2.0..extent / 3.0);
    let h = rng.random_range(2.0..extent / 3.0);
    let x = rng.random_range(0.0..extent - w);
    let y = rng.random_range(0.0..extent - h);
    BBox::new(x, y, x + w, y + h)
}

pub fn jitter(rng: &mut ChaCha8Rng, b: &BBox, s: f64) -> BBox {
    let mut d = || rng.random_range(-s..s);
    BBox::new(b.x1 + d(), b.y1 + d(), b.x2 + d(), b.y2 + d())
}

pub fn rand_dets(rng: &mut ChaCha8Rng, n: usize, classes: usize) -> Vec<Det> {
    let centers: Vec<BBox> = (0..6).map(|_| rand_box(rng, 64.0)).collect();
    (0..n)
        .map(|_| {
            let c = centers[rng.random_range(0..centers.len())];
            // coarse scores produce ties
            let score = rng.random_range(0..20) as f64 / 20.0;
            (jitter(rng, &c, 4.0), rng.random_range(1..=classes), score)
        })
        .collect()
}

pub fn to_detections(d: &[Det]) -> Vec<Detection> {
    d.iter().map(|&(bbox, class, score)| Detection { bbox, class, score }).collect()
}

pub fn scene(id: u64, boxes: &[(BBox, usize)]) -> Scene {
    Scene {
        scene_id: id,
        height: 64,
        width: 64,
        image: vec![0.0; 64 * 64],
        gt_boxes: boxes.iter().map(|b| b.0).collect(),
        gt_labels: boxes.iter().map(|b| b.1).collect(),
    }
}

/// Scenes with ground truth and noisy detections around it, plus false alarms.
pub fn fixture(seed: u64, n_scenes: usize, classes: usize) -> (Vec<Scene>, Vec<SceneDetections>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scenes = Vec::new();
    let mut dets = Vec::new();
    for s in 0..n_scenes {
        let gts: Vec<(BBox, usize)> = (0..rng.random_range(0..4))
            .map(|_| (rand_box(&mut rng, 64.0), rng.random_range(1..=classes)))
            .collect();
        let mut d = Vec::new();
        for &(b, c) in &gts {
            for _ in 0..rng.random_range(0..3) {
                let class = if rng.random_bool(0.85) { c } else { rng.random_range(1..=classes) };
                d.push(Detection {
                    bbox: jitter(&mut rng, &b, 3.0),
                    class,
                    score: rng.random_range(0..10) as f64 / 10.0,
                });
            }
        }
        for _ in 0..rng.random_range(0..3) {
            d.push(Detection {
                bbox: rand_box(&mut rng, 64.0),
                class: rng.random_range(1..=classes),
                score: rng.random_range(0..10) as f64 / 10.0,
            });
        }
        scenes.push(scene(s as u64, &gts));
        dets.push(SceneDetections {
            scene_id: s as u64,
            survivors: d.len(),
            detections: d,
        });
    }
    (scenes, dets)
}

pub fn ap_oracle(scenes: &[Scene], dets: &[SceneDetections], classes: usize, thr: f64) -> Vec<f64> {
    (1..=classes)
        .filter(|&c| scenes.iter().any(|s| s.gt_labels.contains(&c)))
        .map(|c| {
            let gts: Vec<Vec<BBox>> = scenes
                .iter()
                .map(|s| s.gt_boxes.iter().zip(&s.gt_labels).filter(|x| *x.1 == c).map(|x| *x.0).collect())
                .collect();
            let ds: Vec<Vec<(BBox, f64)>> = dets
                .iter()
                .map(|sd| sd.detections.iter().filter(|d| d.class == c).map(|d| (d.bbox, d.score)).collect())
                .collect();
            ap_ref(&ds, &gts, thr)
        })
        .collect()
}

pub const GHM_BINS: usize = 10;

/// Moves every `|p - y|` to at least a tenth of a bin away from a bin edge.
pub fn ghm_safe(b: &mut RandBatch, bins: usize) {
    for (i, z) in b.logits.iter_mut().enumerate() {
        let l = b.labels[i / b.c];
        let y = if l == (i % b.c) as i32 + 1 { 1.0 } else { 0.0 };
        let p = 1.0 / (1.0 + (-*z).exp());
        let g = (p - y).abs() * bins as f64;
        let frac = g - g.floor();
        if !(0.1..=0.9).contains(&frac) {
            let target = ((g.floor() + 0.5) / bins as f64).min(0.95);
            let p_new = if y == 1.0 { 1.0 - target } else { target };
            *z = (p_new / (1.0 - p_new)).ln();
        }
    }
}

fn cls_batch(probs: Value, labels: &[i32]) -> ClsBatch {
    ClsBatch::new(probs, labels.to_vec()).unwrap()
}

fn cls_err(seed: u64, f: &dyn Fn(&ClsBatch) -> Value) -> f64 {
    let b = rand_batch(seed);
    let loss = |x: &Value| f(&cls_batch(x.sigmoid(), &b.labels));
    max_grad_err(&[b.n, b.c], &b.logits, &loss, &|x| loss(x).item().unwrap())
}

pub fn grad_err_ce(seed: u64) -> f64 {
    cls_err(seed, &|b| ce_loss(b).unwrap())
}

pub fn grad_err_focal(seed: u64) -> f64 {
    cls_err(seed, &|b| focal_loss(b, 0.25, 2.0).unwrap()).max(cls_err(seed, &|b| focal_loss(b, 0.4, 0.5).unwrap()))
}

pub fn grad_err_ghmc(seed: u64) -> f64 {
    let mut b = rand_batch(seed);
    ghm_safe(&mut b, GHM_BINS);
    let loss = |x: &Value| {
        let mut st = GhmState::new(GHM_BINS, 0.0).unwrap();
        ghmc_loss(&cls_batch(x.sigmoid(), &b.labels), &mut st, GhmNormalizer::Units).unwrap()
    };
    max_grad_err(&[b.n, b.c], &b.logits, &loss, &|x| loss(x).item().unwrap())
}

pub fn grad_err_smooth_l1(seed: u64) -> f64 {
    let beta = LossConfig::default().smooth_l1_beta;
    let (n, pred, target) = rand_reg(seed, beta);
    let t = Value::new(&[n, 4], target).unwrap();
    let f = |x: &Value| smooth_l1_reg_loss(x, &t, beta).unwrap();
    max_grad_err(&[n, 4], &pred, &f, &|x| f(x).item().unwrap())
}

/// Guided total against differences of `L_reg + w0 L_cls` with `w0` frozen
/// at the unperturbed point, on each input side.
pub fn grad_err_guided(seed: u64) -> f64 {
    let cfg = LossConfig::sampling_free();
    let b = rand_batch(seed);
    let (m, pred, target) = rand_reg(seed, cfg.smooth_l1_beta);
    let t = Value::new(&[m, 4], target).unwrap();
    let cls_of = |l: &Value| ce_loss(&cls_batch(l.sigmoid(), &b.labels)).unwrap();
    let reg_of = |r: &Value| smooth_l1_reg_loss(r, &t, cfg.smooth_l1_beta).unwrap();
    let logits0 = Value::new(&[b.n, b.c], b.logits.clone()).unwrap();
    let pred0 = Value::new(&[m, 4], pred.clone()).unwrap();
    let (c0, r0) = (cls_of(&logits0).item().unwrap(), reg_of(&pred0).item().unwrap());
    let w0 = r0 / c0;

    let via_cls = |l: &Value| total_loss(&cls_of(l), &reg_of(&pred0), &cfg).unwrap().total;
    let frozen_cls = |l: &Value| r0 + w0 * cls_of(l).item().unwrap();
    let e1 = max_grad_err(&[b.n, b.c], &b.logits, &via_cls, &frozen_cls);

    let via_reg = |r: &Value| total_loss(&cls_of(&logits0), &reg_of(r), &cfg).unwrap().total;
    let frozen_reg = |r: &Value| reg_of(r).item().unwrap() + w0 * c0;
    let e2 = max_grad_err(&[m, 4], &pred, &via_reg, &frozen_reg);
    e1.max(e2)
}

/// Checks a biased-sampling draw against the quota rules: `floor(frac * batch)`
/// foreground at most unless background runs out, background fills the rest,
/// no ignored anchors, sorted distinct indices.
pub fn check_biased(m: &MatchResult, batch: usize, frac: f64, s: &[usize]) -> Result<(), String> {
    let n_fg = m.fg_indices.len();
    let n_bg = m.n_background();
    let fg = s.iter().filter(|&&i| m.labels[i] >= 1).count();
    let bg = s.iter().filter(|&&i| m.labels[i] == 0).count();
    if fg + bg != s.len() {
        return Err("ignored anchor sampled".into());
    }
    if !s.windows(2).all(|w| w[0] < w[1]) {
        return Err("indices not sorted and distinct".into());
    }
    let quota = ((frac * batch as f64).floor() as usize).min(n_fg);
    let want_bg = (batch - quota).min(n_bg);
    let want_fg = (batch - want_bg).min(n_fg).max(quota);
    if bg != want_bg || fg != want_fg {
        return Err(format!("got {fg} fg / {bg} bg, expected {want_fg} / {want_bg}"));
    }
    if s.len() != batch.min(n_fg + n_bg) {
        return Err(format!("size {} for batch {batch}", s.len()));
    }
    Ok(())
}
