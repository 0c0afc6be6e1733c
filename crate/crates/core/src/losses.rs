//! Classification and regression losses, their closed-form initial values,
//! the optimal classification bias, guided loss scaling and GHM-C.
//!
//! Classification is `C` independent sigmoid problems per anchor; the sums
//! run over (anchor, class) units and skip ignore-labelled anchors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Value;

/// Floor applied inside every loss `log`, so saturated probabilities give a
/// large finite loss instead of an immediate NaN.
pub const LOG_FLOOR: f64 = 1e-12;

/// Total loss above which training counts as diverged.
pub const DIVERGENCE_LOSS: f64 = 1e4;

/// Sigmoid probabilities with per-anchor labels.
#[derive(Debug, Clone)]
pub struct ClsBatch {
    /// `[N, C]` post-sigmoid probabilities.
    pub probs: Value,
    /// `-1` ignore, `0` background, `1..=C` foreground class.
    pub labels: Vec<i32>,
    pub n_fg: usize,
    normalizer: Option<f64>,
}

impl ClsBatch {
    pub fn new(probs: Value, labels: Vec<i32>) -> Result<ClsBatch> {
        let s = probs.shape();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::shape(
                "cls_batch",
                format!("probabilities {:?} vs {} labels", s, labels.len()),
            ));
        }
        let c = s[1] as i32;
        if let Some(bad) = labels.iter().find(|&&l| l < -1 || l > c) {
            return Err(Error::Config(format!("label {bad} outside [-1, {c}]")));
        }
        let n_fg = labels.iter().filter(|&&l| l >= 1).count();
        Ok(ClsBatch {
            probs,
            labels,
            n_fg,
            normalizer: None,
        })
    }

    /// Rows `rows` of this batch, normalized by the subset's foreground count
    /// (at least 1).
    pub fn subset(&self, rows: &[usize]) -> Result<ClsBatch> {
        let probs = self.probs.gather_rows(rows)?;
        let labels = rows.iter().map(|&r| self.labels[r]).collect();
        let mut b = ClsBatch::new(probs, labels)?;
        b.normalizer = Some(b.n_fg.max(1) as f64);
        Ok(b)
    }

    pub fn num_anchors(&self) -> usize {
        self.labels.len()
    }

    pub fn num_classes(&self) -> usize {
        self.probs.shape()[1]
    }

    /// Divisor of the summed loss: `N_f`, or the subset rule.
    pub fn normalizer(&self) -> Result<f64> {
        match self.normalizer {
            Some(n) => Ok(n),
            None if self.n_fg == 0 => Err(Error::NoForeground),
            None => Ok(self.n_fg as f64),
        }
    }

    /// Number of non-ignore (anchor, class) units.
    pub fn num_units(&self) -> usize {
        self.labels.iter().filter(|&&l| l >= 0).count() * self.num_classes()
    }

    /// `(positive, negative)` unit masks, `[N, C]`; ignore rows are zero in both.
    fn masks(&self, pos_weight: f64, neg_weight: f64) -> (Value, Value) {
        let c = self.num_classes();
        let mut pos = vec![0.0; self.labels.len() * c];
        let mut neg = vec![0.0; self.labels.len() * c];
        for (i, &l) in self.labels.iter().enumerate() {
            if l < 0 {
                continue;
            }
            for j in 0..c {
                if l == j as i32 + 1 {
                    pos[i * c + j] = pos_weight;
                } else {
                    neg[i * c + j] = neg_weight;
                }
            }
        }
        let shape = [self.labels.len(), c];
        (
            Value::new(&shape, pos).expect("mask shape"),
            Value::new(&shape, neg).expect("mask shape"),
        )
    }
}

/// Per-unit binary cross-entropy `[N, C]`, zero on ignore rows.
pub fn ce_terms(batch: &ClsBatch) -> Value {
    let (pos, neg) = batch.masks(1.0, 1.0);
    let p = &batch.probs;
    let log_p = p.log_floored(LOG_FLOOR);
    let log_q = p.rsub(1.0).log_floored(LOG_FLOOR);
    pos.mul(&log_p)
        .and_then(|a| neg.mul(&log_q).and_then(|b| a.add(&b)))
        .expect("masks match probabilities")
        .neg()
}

/// Sigmoid cross-entropy summed over units, divided by `N_f`.
pub fn ce_loss(batch: &ClsBatch) -> Result<Value> {
    let norm = batch.normalizer()?;
    Ok(ce_terms(batch).sum().scale(1.0 / norm))
}

/// Focal loss summed over units, divided by `N_f`.
pub fn focal_loss(batch: &ClsBatch, alpha: f64, gamma: f64) -> Result<Value> {
    let norm = batch.normalizer()?;
    let (pos, neg) = batch.masks(alpha, 1.0 - alpha);
    let p = &batch.probs;
    let q = p.rsub(1.0);
    let fg = q.powf(gamma).mul(&p.log_floored(LOG_FLOOR))?.mul(&pos)?;
    let bg = p.powf(gamma).mul(&q.log_floored(LOG_FLOOR))?.mul(&neg)?;
    Ok(fg.add(&bg)?.sum().scale(-1.0 / norm))
}

/// Closed form of the classification loss when every prediction equals `pi`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AnalyticLoss {
    Focal { alpha: f64, gamma: f64 },
    /// Cross-entropy scaled by `w`.
    Ce { w: f64 },
}

/// Initial loss with all `p = pi`, given the all-to-foreground ratio `N / N_f`
/// and `C` classes. Each foreground anchor contributes one positive unit;
/// the remaining `N C / N_f - 1` units per foreground anchor are negatives.
pub fn initial_loss_analytic(variant: AnalyticLoss, pi: f64, ratio: f64, num_classes: usize) -> f64 {
    let negatives = ratio * num_classes as f64 - 1.0;
    let log_pi = pi.ln();
    let log_1m = (-pi).ln_1p();
    match variant {
        AnalyticLoss::Focal { alpha, gamma } => {
            -alpha * (1.0 - pi).powf(gamma) * log_pi
                - (1.0 - alpha) * pi.powf(gamma) * negatives * log_1m
        }
        AnalyticLoss::Ce { w } => -w * log_pi - w * negatives * log_1m,
    }
}

/// Prior `pi = N_f / (N C)` minimizing the initial cross-entropy, and the
/// matching sigmoid bias `b = -ln(N C / N_f - 1)`.
pub fn optimal_bias(n: f64, n_fg: f64, num_classes: usize) -> Result<(f64, f64)> {
    let total = n * num_classes as f64;
    if !(n_fg > 0.0 && n_fg < total) {
        return Err(Error::Degenerate(format!(
            "optimal bias needs 0 < N_f < N*C, got N_f={n_fg}, N*C={total}"
        )));
    }
    let pi = n_fg / total;
    let b = -(total / n_fg - 1.0).ln();
    Ok((pi, b))
}

/// [`optimal_bias`] from the ratio `N / N_f`.
pub fn optimal_bias_from_ratio(ratio: f64, num_classes: usize) -> Result<(f64, f64)> {
    optimal_bias(ratio, 1.0, num_classes)
}

/// Bias giving `sigmoid(b) = pi`.
pub fn prior_bias(pi: f64) -> f64 {
    -((1.0 - pi) / pi).ln()
}

/// Smooth-L1 summed over the 4 coordinates, averaged over foreground anchors.
pub fn smooth_l1_reg_loss(pred: &Value, target: &Value, beta: f64) -> Result<Value> {
    let s = pred.shape();
    if s.len() != 2 || s[1] != 4 || target.shape() != s {
        return Err(Error::shape(
            "smooth_l1_reg_loss",
            format!("pred {:?} vs target {:?}", s, target.shape()),
        ));
    }
    if s[0] == 0 {
        return Err(Error::NoForeground);
    }
    Ok(pred.sub(target)?.smooth_l1(beta).sum().scale(1.0 / s[0] as f64))
}

/// Classification loss rescaled to track the regression loss.
#[derive(Debug, Clone)]
pub struct Guided {
    /// `w * L_cls`, differentiable through `L_cls` only.
    pub scaled: Value,
    /// The frozen weight `stage_factor * L_reg / L_cls`.
    pub weight: f64,
}

/// `stop_gradient(stage_factor * L_reg / L_cls) * L_cls`.
pub fn guided_scale(l_cls: &Value, l_reg: &Value, stage_factor: f64) -> Result<Guided> {
    let cls = l_cls.item()?;
    let reg = l_reg.item()?;
    if !(cls > 0.0 && cls.is_finite()) {
        return Err(Error::Divergence(format!(
            "guided scaling needs a positive finite classification loss, got {cls}"
        )));
    }
    if !reg.is_finite() {
        return Err(Error::Divergence(format!("non-finite regression loss {reg}")));
    }
    let weight = stage_factor * reg / cls;
    let w = Value::scalar(weight); // constant: no gradient flows into the weight
    Ok(Guided {
        scaled: w.mul(l_cls)?,
        weight,
    })
}

/// Divisor of the GHM-C weighted sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GhmNormalizer {
    /// Number of non-ignore (anchor, class) units.
    #[default]
    Units,
    /// Foreground anchor count, comparable with cross-entropy.
    Foreground,
}

/// Running gradient-density histogram of GHM-C.
#[derive(Debug, Clone, PartialEq)]
pub struct GhmState {
    bins: usize,
    momentum: f64,
    acc: Option<Vec<f64>>,
}

impl GhmState {
    pub fn new(bins: usize, momentum: f64) -> Result<GhmState> {
        if bins == 0 {
            return Err(Error::Config("GHM-C needs at least one bin".into()));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!(
                "GHM-C momentum must be in [0, 1), got {momentum}"
            )));
        }
        Ok(GhmState {
            bins,
            momentum,
            acc: None,
        })
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    fn bin_of(&self, g: f64) -> usize {
        ((g * self.bins as f64) as usize).min(self.bins - 1)
    }

    /// Weights `beta = n / (density * nonempty_bins)` for gradient norms `g`,
    /// updating the running density. With momentum 0, weights sum to `n`.
    pub fn weights(&mut self, g: &[f64]) -> Vec<f64> {
        let n = g.len() as f64;
        let mut counts = vec![0.0; self.bins];
        let idx: Vec<usize> = g.iter().map(|&x| self.bin_of(x)).collect();
        for &b in &idx {
            counts[b] += 1.0;
        }
        let density = match (&mut self.acc, self.momentum > 0.0) {
            (Some(acc), true) => {
                for (a, &c) in acc.iter_mut().zip(&counts) {
                    if c > 0.0 {
                        *a = self.momentum * *a + (1.0 - self.momentum) * c;
                    }
                }
                acc.clone()
            }
            (slot, true) => {
                // first batch seeds the running density with its own counts
                *slot = Some(counts.clone());
                counts.clone()
            }
            (_, false) => counts.clone(),
        };
        let nonempty = counts.iter().filter(|&&c| c > 0.0).count().max(1) as f64;
        idx.iter().map(|&b| n / (density[b] * nonempty)).collect()
    }
}

/// GHM-C: cross-entropy re-weighted by inverse gradient density.
///
/// The weights come from the detached gradient norms `|p - y|` and are
/// constants in the graph.
pub fn ghmc_loss(batch: &ClsBatch, state: &mut GhmState, normalizer: GhmNormalizer) -> Result<Value> {
    let c = batch.num_classes();
    let p = batch.probs.data();
    let mut units = Vec::new();
    let mut g = Vec::new();
    for (i, &l) in batch.labels.iter().enumerate() {
        if l < 0 {
            continue;
        }
        for j in 0..c {
            let y = if l == j as i32 + 1 { 1.0 } else { 0.0 };
            units.push(i * c + j);
            g.push((p[i * c + j] - y).abs());
        }
    }
    if units.is_empty() {
        return Err(Error::NoForeground);
    }
    let beta = state.weights(&g);
    let mut w = vec![0.0; batch.labels.len() * c];
    for (&u, &b) in units.iter().zip(&beta) {
        w[u] = b;
    }
    let weights = Value::new(&[batch.labels.len(), c], w)?;
    let norm = match normalizer {
        GhmNormalizer::Units => units.len() as f64,
        GhmNormalizer::Foreground => batch.normalizer()?,
    };
    Ok(ce_terms(batch).mul(&weights)?.sum().scale(1.0 / norm))
}

/// Classification loss family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClsVariant {
    Ce,
    Focal { alpha: f64, gamma: f64 },
    Ghmc { bins: usize, momentum: f64 },
}

impl ClsVariant {
    pub fn focal_default() -> ClsVariant {
        ClsVariant::Focal {
            alpha: 0.25,
            gamma: 2.0,
        }
    }

    pub fn ghmc_default() -> ClsVariant {
        ClsVariant::Ghmc {
            bins: 30,
            momentum: 0.75,
        }
    }
}

/// Classification loss, weighting and initialization policy of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub cls: ClsVariant,
    /// Constant weight on the classification loss.
    #[serde(default)]
    pub fixed_w: Option<f64>,
    /// Guided loss scaling.
    #[serde(default)]
    pub guided: bool,
    /// Multiplier on the guided weight.
    #[serde(default = "one")]
    pub stage_factor: f64,
    /// Manual prior for the final classification bias.
    #[serde(default)]
    pub init_pi: Option<f64>,
    /// Bias from the dataset's imbalance statistics.
    #[serde(default)]
    pub optimal_bias: bool,
    #[serde(default = "default_beta")]
    pub smooth_l1_beta: f64,
    #[serde(default)]
    pub ghm_normalizer: GhmNormalizer,
}

fn one() -> f64 {
    1.0
}

fn default_beta() -> f64 {
    0.11
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            cls: ClsVariant::Ce,
            fixed_w: None,
            guided: false,
            stage_factor: 1.0,
            init_pi: None,
            optimal_bias: false,
            smooth_l1_beta: default_beta(),
            ghm_normalizer: GhmNormalizer::Units,
        }
    }
}

impl LossConfig {
    /// Guided cross-entropy with the optimal bias.
    pub fn sampling_free() -> LossConfig {
        LossConfig {
            guided: true,
            optimal_bias: true,
            ..LossConfig::default()
        }
    }

    /// Focal loss (alpha 0.25, gamma 2) with prior 0.01.
    pub fn focal() -> LossConfig {
        LossConfig {
            cls: ClsVariant::focal_default(),
            init_pi: Some(0.01),
            ..LossConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.guided && self.fixed_w.is_some() {
            return bad("guided and fixed_w are mutually exclusive".into());
        }
        if self.optimal_bias && self.init_pi.is_some() {
            return bad("optimal_bias and init_pi are mutually exclusive".into());
        }
        if let Some(w) = self.fixed_w {
            if !(w > 0.0 && w.is_finite()) {
                return bad(format!("fixed_w must be positive, got {w}"));
            }
        }
        if !(self.stage_factor > 0.0 && self.stage_factor.is_finite()) {
            return bad(format!("stage_factor must be positive, got {}", self.stage_factor));
        }
        if let Some(pi) = self.init_pi {
            if !(pi > 0.0 && pi < 1.0) {
                return bad(format!("init_pi must be in (0, 1), got {pi}"));
            }
        }
        if !(self.smooth_l1_beta > 0.0) {
            return bad("smooth_l1_beta must be positive".into());
        }
        match self.cls {
            ClsVariant::Ce => {}
            ClsVariant::Focal { alpha, gamma } => {
                if !(alpha > 0.0 && alpha < 1.0) || !(gamma >= 0.0) {
                    return bad(format!("focal alpha {alpha} / gamma {gamma} out of range"));
                }
            }
            ClsVariant::Ghmc { bins, momentum } => {
                GhmState::new(bins, momentum)?;
            }
        }
        Ok(())
    }
}

/// Combined detector loss `L_reg + w L_cls`.
#[derive(Debug, Clone)]
pub struct TotalLoss {
    pub total: Value,
    /// Effective classification weight this step.
    pub weight: f64,
    /// `w * L_cls` as a number.
    pub weighted_cls: f64,
}

/// `L_reg + w L_cls` with `w` fixed, guided, or 1. Signals divergence on a
/// non-finite total or one above [`DIVERGENCE_LOSS`].
pub fn total_loss(l_cls: &Value, l_reg: &Value, config: &LossConfig) -> Result<TotalLoss> {
    let (weighted, weight) = if config.guided {
        let g = guided_scale(l_cls, l_reg, config.stage_factor)?;
        (g.scaled, g.weight)
    } else {
        let w = config.fixed_w.unwrap_or(1.0);
        (l_cls.scale(w), w)
    };
    let total = l_reg.add(&weighted)?;
    let v = total.item()?;
    if !v.is_finite() || v > DIVERGENCE_LOSS {
        return Err(Error::Divergence(format!("total loss {v}")));
    }
    Ok(TotalLoss {
        weighted_cls: weighted.item()?,
        total,
        weight,
    })
}
