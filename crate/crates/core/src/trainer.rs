//! Plain-SGD training loop over `L_reg + w L_cls`, with divergence detection
//! and per-iteration loss logging.

use std::io::Write;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anchors::{match_anchors, ImbalanceStats, MatchResult};
use crate::detector::{init_detector, Detector, DetectorConfig, InitPolicy};
use crate::error::{Error, Result};
use crate::losses::{
    ce_loss, ce_terms, focal_loss, ghmc_loss, initial_loss_analytic, smooth_l1_reg_loss, total_loss,
    AnalyticLoss, ClsBatch, ClsVariant, GhmState, LossConfig,
};
use crate::sampler::{biased_sample, ohem_for_match, SamplerConfig, SamplerStrategy};
use crate::scenes::Scene;
use crate::tensor::{backward, sgd_step, GradStore, ParamStore, Value};

pub const RECORD_SCHEMA_VERSION: u32 = 1;
/// Iterations per loss-balance window.
pub const BALANCE_WINDOW: usize = 50;
/// `L_reg / (w L_cls)` outside this band marks a window as imbalanced.
pub const BALANCE_BAND: (f64, f64) = (0.2, 5.0);

/// Iteration count, learning rate and scenes per mini-batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub iterations: usize,
    pub learning_rate: f64,
    pub batch_scenes: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            iterations: 1200,
            learning_rate: 0.05,
            batch_scenes: 4,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.batch_scenes == 0 {
            return Err(Error::Config("batch_scenes must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// One logged iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterRow {
    pub t: u64,
    pub cls_raw: f64,
    pub cls_weighted: f64,
    pub reg: f64,
    pub weight: f64,
    pub learning_rate: f64,
    pub n_fg: usize,
    /// No foreground in the batch; no update was made.
    pub skipped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Diverged { t: u64, reason: String },
}

/// First-batch cross-entropy against its closed form, measured at `t = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitialCheck {
    /// `sigmoid(b)` of the initial classification bias.
    pub pi: f64,
    pub measured_ce: f64,
    /// Closed form with the dataset-mean `N / N_f`.
    pub analytic_dataset: f64,
    /// Closed form with this batch's own `N / N_f`.
    pub analytic_batch: f64,
    pub dataset_ratio: f64,
    pub batch_ratio: f64,
}

impl InitialCheck {
    pub fn rel_err_dataset(&self) -> f64 {
        (self.measured_ce - self.analytic_dataset).abs() / self.analytic_dataset.abs()
    }

    pub fn rel_err_batch(&self) -> f64 {
        (self.measured_ce - self.analytic_batch).abs() / self.analytic_batch.abs()
    }
}

/// Full log of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_digest: String,
    pub seed: u64,
    pub status: RunStatus,
    pub initial_check: Option<InitialCheck>,
    pub rows: Vec<IterRow>,
}

impl RunRecord {
    pub fn diverged(&self) -> bool {
        matches!(self.status, RunStatus::Diverged { .. })
    }

    /// Diverged, or some window left the loss-balance band.
    pub fn unstable(&self) -> bool {
        self.diverged() || loss_balance_report(self).any_imbalanced()
    }

    pub const CSV_HEADER: [&'static str; 8] = [
        "t",
        "l_cls_raw",
        "l_cls_weighted",
        "l_reg",
        "w",
        "lr",
        "n_fg",
        "skipped",
    ];

    /// One row per iteration, columns as in [`RunRecord::CSV_HEADER`].
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(Self::CSV_HEADER)?;
        for r in &self.rows {
            w.write_record([
                r.t.to_string(),
                r.cls_raw.to_string(),
                r.cls_weighted.to_string(),
                r.reg.to_string(),
                r.weight.to_string(),
                r.learning_rate.to_string(),
                r.n_fg.to_string(),
                (r.skipped as u8).to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::Serde(e.to_string()))?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(input: R) -> Result<Vec<IterRow>> {
        let mut rdr = csv::Reader::from_reader(input);
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let f = |i: usize| -> Result<f64> {
                rec[i]
                    .parse::<f64>()
                    .map_err(|e| Error::Serde(format!("column {i}: {e}")))
            };
            rows.push(IterRow {
                t: f(0)? as u64,
                cls_raw: f(1)?,
                cls_weighted: f(2)?,
                reg: f(3)?,
                weight: f(4)?,
                learning_rate: f(5)?,
                n_fg: f(6)? as usize,
                skipped: f(7)? != 0.0,
            });
        }
        Ok(rows)
    }

    /// JSON header: everything except the per-iteration rows.
    pub fn header_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Header<'a> {
            schema_version: u32,
            config_digest: &'a str,
            seed: u64,
            status: &'a RunStatus,
            initial_check: &'a Option<InitialCheck>,
            iterations_logged: usize,
        }
        Ok(serde_json::to_string_pretty(&Header {
            schema_version: RECORD_SCHEMA_VERSION,
            config_digest: &self.config_digest,
            seed: self.seed,
            status: &self.status,
            initial_check: &self.initial_check,
            iterations_logged: self.rows.len(),
        })? + "\n")
    }
}

/// Mean `L_reg / (w L_cls)` over one window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BalanceWindow {
    pub start_t: u64,
    pub end_t: u64,
    pub mean_ratio: f64,
    pub imbalanced: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BalanceReport {
    pub windows: Vec<BalanceWindow>,
}

impl BalanceReport {
    pub fn any_imbalanced(&self) -> bool {
        self.windows.iter().any(|w| w.imbalanced)
    }
}

/// Windows of [`BALANCE_WINDOW`] logged iterations (skipped ones excluded).
/// A diverged record is reported up to its last logged iteration.
pub fn loss_balance_report(record: &RunRecord) -> BalanceReport {
    let rows: Vec<&IterRow> = record.rows.iter().filter(|r| !r.skipped).collect();
    let windows = rows
        .chunks(BALANCE_WINDOW)
        .map(|chunk| {
            let mean_ratio =
                chunk.iter().map(|r| r.reg / r.cls_weighted).sum::<f64>() / chunk.len() as f64;
            BalanceWindow {
                start_t: chunk[0].t,
                end_t: chunk[chunk.len() - 1].t,
                mean_ratio,
                imbalanced: !(BALANCE_BAND.0..=BALANCE_BAND.1).contains(&mean_ratio),
            }
        })
        .collect();
    BalanceReport { windows }
}

/// Initialization policy implied by a loss configuration.
pub fn init_policy(loss: &LossConfig) -> InitPolicy {
    if loss.optimal_bias {
        InitPolicy::OptimalBias
    } else if let Some(pi) = loss.init_pi {
        InitPolicy::ManualPi { pi }
    } else {
        InitPolicy::DefaultZeroBias
    }
}

/// Classification and regression losses of one mini-batch.
pub struct BatchLosses {
    pub cls: Value,
    pub reg: Value,
    pub n_fg: usize,
    /// Full-batch cross-entropy value (no sampling, no weighting).
    pub full_ce: f64,
    /// `N / N_f` of this batch.
    pub batch_ratio: f64,
}

/// What one [`Trainer::step`] did.
#[derive(Debug, Clone, PartialEq)]
pub enum StepOutcome {
    Updated(IterRow),
    Skipped(IterRow),
    Diverged(String),
}

/// Stateful training loop; [`train`] drives it to completion.
pub struct Trainer {
    pub detector: Detector,
    pub store: ParamStore,
    pub stats: ImbalanceStats,
    loss: LossConfig,
    sampler: SamplerConfig,
    schedule: Schedule,
    scenes: Vec<Scene>,
    matches: Vec<MatchResult>,
    ghm: Option<GhmState>,
    sampler_rng: ChaCha8Rng,
    seed: u64,
    record: RunRecord,
    finished: bool,
}

impl Trainer {
    pub fn new(
        train_scenes: &[Scene],
        detector_cfg: &DetectorConfig,
        loss: &LossConfig,
        sampler: &SamplerConfig,
        schedule: &Schedule,
        seed: u64,
        config_digest: String,
    ) -> Result<Trainer> {
        loss.validate()?;
        sampler.validate()?;
        schedule.validate()?;
        let first = train_scenes
            .first()
            .ok_or_else(|| Error::Config("training set is empty".into()))?;
        let detector = Detector::new(detector_cfg.clone(), first.height, first.width)?;
        let a = &detector_cfg.anchors;
        let matches = train_scenes
            .iter()
            .map(|s| match_anchors(&detector.anchors, s, a.fg_thresh, a.bg_thresh))
            .collect::<Result<Vec<_>>>()?;
        let stats = ImbalanceStats::from_matches(&matches, a.ignore_in_n)?;
        let store = init_detector(
            detector_cfg,
            init_policy(loss),
            Some(&stats),
            seed,
            schedule.learning_rate,
        )?;
        let ghm = match loss.cls {
            ClsVariant::Ghmc { bins, momentum } => Some(GhmState::new(bins, momentum)?),
            _ => None,
        };
        Ok(Trainer {
            detector,
            store,
            stats,
            loss: loss.clone(),
            sampler: *sampler,
            schedule: *schedule,
            scenes: train_scenes.to_vec(),
            matches,
            ghm,
            sampler_rng: ChaCha8Rng::seed_from_u64(sampler.seed ^ seed.rotate_left(17)),
            seed,
            record: RunRecord {
                config_digest,
                seed,
                status: RunStatus::Completed,
                initial_check: None,
                rows: Vec::new(),
            },
            finished: false,
        })
    }

    pub fn record(&self) -> &RunRecord {
        &self.record
    }

    /// Scene indices of the mini-batch at iteration `t`: consecutive slices of
    /// a per-epoch shuffle seeded by `(seed, epoch)`.
    pub fn batch_indices(&self, t: u64) -> Vec<usize> {
        let n = self.scenes.len();
        let b = self.schedule.batch_scenes.min(n);
        let per_epoch = (n / b).max(1);
        let epoch = t as usize / per_epoch;
        let slot = t as usize % per_epoch;
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5EED_0000_0000_0000 ^ epoch as u64);
        order.shuffle(&mut rng);
        order[slot * b..slot * b + b].to_vec()
    }

    /// Builds the loss graph for the batch at `t` against the current
    /// parameters. `None` when the batch has no foreground anchor.
    pub fn batch_losses(&mut self, t: u64) -> Result<Option<BatchLosses>> {
        let idx = self.batch_indices(t);
        let n = self.detector.num_anchors();
        let refs: Vec<&Scene> = idx.iter().map(|&i| &self.scenes[i]).collect();
        let mut labels = Vec::with_capacity(idx.len() * n);
        let mut fg_rows = Vec::new();
        let mut targets = Vec::new();
        for (b, &i) in idx.iter().enumerate() {
            let m = &self.matches[i];
            labels.extend_from_slice(&m.labels);
            fg_rows.extend(m.fg_indices.iter().map(|&a| b * n + a));
            let dw = self.detector.config.anchors.delta_weights;
            for t4 in &m.regression_targets {
                targets.extend(t4.iter().zip(dw).map(|(t, w)| t * w));
            }
        }
        if fg_rows.is_empty() {
            return Ok(None);
        }
        let images = self.detector.images(&refs)?;
        let out = self.detector.forward(&self.store, &images)?;
        let full = ClsBatch::new(out.probs.clone(), labels)?;
        let n_fg = full.n_fg;
        let full_ce = ce_loss(&full.clone_detached())?.item()?;
        let batch = match self.sampler.strategy {
            SamplerStrategy::None => full,
            SamplerStrategy::Biased {
                batch_size,
                fg_fraction,
            } => {
                let mut rows = Vec::new();
                for (b, &i) in idx.iter().enumerate() {
                    let pick = biased_sample(&self.matches[i], batch_size, fg_fraction, &mut self.sampler_rng)?;
                    rows.extend(pick.into_iter().map(|a| b * n + a));
                }
                full.subset(&rows)?
            }
            SamplerStrategy::Ohem { k } => {
                // selection on detached per-anchor losses
                let terms = ce_terms(&full.clone_detached());
                let c = full.num_classes();
                let per_anchor: Vec<f64> =
                    terms.data().chunks(c).map(|r| r.iter().sum()).collect();
                let mut rows = Vec::new();
                for (b, &i) in idx.iter().enumerate() {
                    let pick = ohem_for_match(&self.matches[i], &per_anchor[b * n..(b + 1) * n], k);
                    rows.extend(pick.into_iter().map(|a| b * n + a));
                }
                full.subset(&rows)?
            }
        };
        let cls = match self.loss.cls {
            ClsVariant::Ce => ce_loss(&batch)?,
            ClsVariant::Focal { alpha, gamma } => focal_loss(&batch, alpha, gamma)?,
            ClsVariant::Ghmc { .. } => ghmc_loss(
                &batch,
                self.ghm.as_mut().expect("GHM state exists for GHM-C"),
                self.loss.ghm_normalizer,
            )?,
        };
        let n_fg_rows = fg_rows.len();
        let pred = out.deltas.gather_rows(&fg_rows)?;
        let target = Value::new(&[n_fg_rows, 4], targets)?;
        let reg = smooth_l1_reg_loss(&pred, &target, self.loss.smooth_l1_beta)?;
        Ok(Some(BatchLosses {
            cls,
            reg,
            n_fg,
            full_ce,
            batch_ratio: (idx.len() * n) as f64 / n_fg as f64,
        }))
    }

    fn initial_check(&self, losses: &BatchLosses) -> Result<InitialCheck> {
        let bias = self.store.require("cls_head.out.bias")?.data()[0];
        let pi = Value::scalar(bias).sigmoid().item()?;
        let c = self.detector.config.num_classes;
        let ce = AnalyticLoss::Ce { w: 1.0 };
        Ok(InitialCheck {
            pi,
            measured_ce: losses.full_ce,
            analytic_dataset: initial_loss_analytic(ce, pi, self.stats.ratio, c),
            analytic_batch: initial_loss_analytic(ce, pi, losses.batch_ratio, c),
            dataset_ratio: self.stats.ratio,
            batch_ratio: losses.batch_ratio,
        })
    }

    /// One iteration: forward, losses, backward, SGD update.
    pub fn step(&mut self) -> Result<StepOutcome> {
        let t = self.store.iteration();
        let lr = self.store.learning_rate();
        let losses = match self.batch_losses(t) {
            Ok(Some(l)) => l,
            Ok(None) => {
                let row = IterRow {
                    t,
                    cls_raw: 0.0,
                    cls_weighted: 0.0,
                    reg: 0.0,
                    weight: 0.0,
                    learning_rate: lr,
                    n_fg: 0,
                    skipped: true,
                };
                debug!("t={t}: no foreground anchors, skipping");
                self.store.advance();
                self.record.rows.push(row);
                return Ok(StepOutcome::Skipped(row));
            }
            Err(Error::Divergence(reason)) => return Ok(self.diverge(t, reason)),
            Err(e) => return Err(e),
        };
        if t == 0 {
            self.record.initial_check = Some(self.initial_check(&losses)?);
        }
        let total = match total_loss(&losses.cls, &losses.reg, &self.loss) {
            Ok(total) => total,
            Err(Error::Divergence(reason)) => return Ok(self.diverge(t, reason)),
            Err(e) => return Err(e),
        };
        let grads: GradStore = backward(&total.total)?;
        if let Err(Error::Divergence(reason)) = sgd_step(&mut self.store, &grads) {
            return Ok(self.diverge(t, reason));
        }
        let row = IterRow {
            t,
            cls_raw: losses.cls.item()?,
            cls_weighted: total.weighted_cls,
            reg: losses.reg.item()?,
            weight: total.weight,
            learning_rate: lr,
            n_fg: losses.n_fg,
            skipped: false,
        };
        self.record.rows.push(row);
        Ok(StepOutcome::Updated(row))
    }

    fn diverge(&mut self, t: u64, reason: String) -> StepOutcome {
        info!("run diverged at t={t}: {reason}");
        self.record.status = RunStatus::Diverged {
            t,
            reason: reason.clone(),
        };
        self.finished = true;
        StepOutcome::Diverged(reason)
    }

    pub fn finished(&self) -> bool {
        self.finished || self.store.iteration() as usize >= self.schedule.iterations
    }

    pub fn run(mut self) -> Result<TrainOutput> {
        while !self.finished() {
            self.step()?;
        }
        Ok(TrainOutput {
            detector: self.detector,
            store: self.store,
            record: self.record,
            stats: self.stats,
        })
    }
}

impl ClsBatch {
    /// Same probabilities and labels with no gradient tracking.
    fn clone_detached(&self) -> ClsBatch {
        ClsBatch::new(self.probs.stop_gradient(), self.labels.clone()).expect("same shapes")
    }
}

/// Result of a training run.
pub struct TrainOutput {
    pub detector: Detector,
    pub store: ParamStore,
    pub record: RunRecord,
    /// Training-split imbalance statistics.
    pub stats: ImbalanceStats,
}

/// Trains a detector. Divergence ends the run early and is reported in the
/// record's status, never as an error.
pub fn train(
    train_scenes: &[Scene],
    detector_cfg: &DetectorConfig,
    loss: &LossConfig,
    sampler: &SamplerConfig,
    schedule: &Schedule,
    seed: u64,
) -> Result<TrainOutput> {
    #[derive(Serialize)]
    struct Digestible<'a> {
        detector: &'a DetectorConfig,
        loss: &'a LossConfig,
        sampler: &'a SamplerConfig,
        schedule: &'a Schedule,
    }
    let digest = crate::config::digest(&Digestible {
        detector: detector_cfg,
        loss,
        sampler,
        schedule,
    });
    Trainer::new(train_scenes, detector_cfg, loss, sampler, schedule, seed, digest)?.run()
}
