//! Experiment configuration files and the commands built on them.
//!
//! An [`ExperimentConfig`] is a TOML document (`schema_version = 1`). Every
//! command reads one, writes its artifacts under `out`, and is a pure
//! function of the config digest and seed apart from wall-time fields.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::anchors::{match_anchors, AnchorConfig, ImbalanceStats};
use crate::detector::{load_checkpoint, save_checkpoint, Detector, DetectorConfig};
use crate::error::{Error, Result};
use crate::eval::{
    evaluate_model, sweep_rows, threshold_sweep, write_sweep_csv, EvalConfig, EvalReport, ThresholdPolicy,
};
use crate::losses::{initial_loss_analytic, optimal_bias, AnalyticLoss, ClsVariant, LossConfig};
use crate::sampler::SamplerConfig;
use crate::scenes::{generate, read_dataset, split, write_dataset, DatasetSpec, Manifest, Scene, MANIFEST_FILE};
use crate::svg::{Plot, Series};
use crate::trainer::{loss_balance_report, BalanceReport, RunRecord, RunStatus, Schedule, Trainer, TrainOutput};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;
pub const TRAIN_DIR: &str = "train";
pub const EVAL_DIR: &str = "eval";
pub const GRID_DIR: &str = "grid";

/// Backbone and head widths; the class count comes from the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub channels: Vec<usize>,
    pub head_depth: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        let d = DetectorConfig::default();
        BackboneConfig {
            channels: d.channels,
            head_depth: d.head_depth,
        }
    }
}

/// Prior of the final classification bias in a grid row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PiChoice {
    Prior(f64),
    Named(PiName),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PiName {
    Optimal,
}

/// Classification weight in a grid column.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WeightChoice {
    Fixed(f64),
    Named(WeightName),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightName {
    Guided,
}

impl PiChoice {
    fn label(&self) -> String {
        match self {
            PiChoice::Prior(p) => format!("pi={p}"),
            PiChoice::Named(PiName::Optimal) => "pi=optimal".into(),
        }
    }
}

impl WeightChoice {
    fn label(&self) -> String {
        match self {
            WeightChoice::Fixed(w) => format!("w={w}"),
            WeightChoice::Named(WeightName::Guided) => "w=guided".into(),
        }
    }
}

/// Cross-entropy runs over `pi x w`, plus the optional mechanism ablation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    #[serde(default)]
    pub pi: Vec<PiChoice>,
    #[serde(default)]
    pub w: Vec<WeightChoice>,
    #[serde(default)]
    pub ablation: bool,
    /// Seeds per cell; empty means the experiment seed.
    #[serde(default)]
    pub seeds: Vec<u64>,
}

/// One closed-form initial-loss row of the analysis report.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyticRow {
    pub loss: AnalyticLoss,
    pub pi: f64,
    /// Defaults to the dataset's `N / N_f`.
    #[serde(default)]
    pub ratio: Option<f64>,
    /// Defaults to the dataset's class count.
    #[serde(default)]
    pub num_classes: Option<usize>,
}

fn default_analytic_rows() -> Vec<AnalyticRow> {
    vec![
        AnalyticRow {
            loss: AnalyticLoss::Focal {
                alpha: 0.25,
                gamma: 2.0,
            },
            pi: 1e-2,
            ratio: Some(1e3),
            num_classes: Some(80),
        },
        AnalyticRow {
            loss: AnalyticLoss::Ce { w: 0.1 },
            pi: 1e-5,
            ratio: Some(1e3),
            num_classes: Some(80),
        },
        AnalyticRow {
            loss: AnalyticLoss::Ce { w: 1.0 },
            pi: 1e-2,
            ratio: None,
            num_classes: None,
        },
    ]
}

fn default_out() -> PathBuf {
    PathBuf::from("runs/default")
}

fn default_train_fraction() -> f64 {
    5.0 / 6.0
}

fn default_sweep() -> Vec<f64> {
    vec![0.0, 0.05]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    /// Dataset directory; defaults to `<out>/data`.
    #[serde(default)]
    pub data_dir: Option<PathBuf>,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    #[serde(default = "DatasetSpec::imb_std")]
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub anchors: AnchorConfig,
    #[serde(default)]
    pub detector: BackboneConfig,
    #[serde(default = "LossConfig::sampling_free")]
    pub loss: LossConfig,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default)]
    pub eval: EvalConfig,
    /// Fixed thresholds of the evaluation sweep; the adaptive one is always added.
    #[serde(default = "default_sweep")]
    pub sweep: Vec<f64>,
    #[serde(default)]
    pub grid: Option<GridSpec>,
    #[serde(default = "default_analytic_rows")]
    pub analytic: Vec<AnalyticRow>,
}

impl Default for ExperimentConfig {
    /// The `imb-std` benchmark with the full Sampling-Free mechanism.
    fn default() -> Self {
        ExperimentConfig {
            schema_version: CONFIG_SCHEMA_VERSION,
            seed: 0,
            out: default_out(),
            data_dir: None,
            train_fraction: default_train_fraction(),
            dataset: DatasetSpec::imb_std(),
            anchors: AnchorConfig::default(),
            detector: BackboneConfig::default(),
            loss: LossConfig::sampling_free(),
            sampler: SamplerConfig::default(),
            schedule: Schedule::default(),
            eval: EvalConfig::default(),
            sweep: default_sweep(),
            grid: None,
            analytic: default_analytic_rows(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<ExperimentConfig> {
        let cfg: ExperimentConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ExperimentConfig::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported config schema_version {} (expected {CONFIG_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config(format!(
                "train_fraction must be in (0, 1), got {}",
                self.train_fraction
            )));
        }
        self.dataset.validate()?;
        self.detector_config().validate()?;
        self.loss.validate()?;
        self.sampler.validate()?;
        self.schedule.validate()?;
        self.eval.validate()?;
        for &t in &self.sweep {
            ThresholdPolicy::Fixed { theta: t }.resolve(None)?;
        }
        Ok(())
    }

    pub fn detector_config(&self) -> DetectorConfig {
        DetectorConfig {
            channels: self.detector.channels.clone(),
            head_depth: self.detector.head_depth,
            num_classes: self.dataset.num_classes,
            anchors: self.anchors.clone(),
        }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.data_dir.clone().unwrap_or_else(|| self.out.join("data"))
    }

    /// Digest of every setting that affects results; output locations are left out.
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.out = PathBuf::new();
        c.data_dir = None;
        crate::config::digest(&c)
    }

    fn with_loss(&self, loss: LossConfig, seed: u64) -> ExperimentConfig {
        ExperimentConfig {
            loss,
            seed,
            ..self.clone()
        }
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

/// Generates the dataset into the data directory. Refuses to replace an
/// existing dataset unless `force` is set.
pub fn cmd_generate(cfg: &ExperimentConfig, force: bool) -> Result<Manifest> {
    let dir = cfg.data_dir();
    if dir.join(MANIFEST_FILE).exists() {
        if !force {
            return Err(Error::Config(format!(
                "{} already holds a dataset; pass --force to overwrite",
                dir.display()
            )));
        }
        let scenes = dir.join("scenes");
        if scenes.exists() {
            fs::remove_dir_all(&scenes).map_err(|e| Error::io(&scenes, e))?;
        }
    }
    let scenes = generate(&cfg.dataset)?;
    let manifest = write_dataset(&dir, &cfg.dataset, &scenes)?;
    info!(
        "wrote {} scenes to {} (digest {})",
        scenes.len(),
        dir.display(),
        manifest.dataset_digest
    );
    Ok(manifest)
}

/// Train and eval splits of the on-disk dataset, which must match the config's spec.
pub fn load_splits(cfg: &ExperimentConfig) -> Result<(Vec<Scene>, Vec<Scene>)> {
    let dir = cfg.data_dir();
    if !dir.join(MANIFEST_FILE).exists() {
        return Err(Error::Config(format!(
            "no dataset at {}; run `generate` first",
            dir.display()
        )));
    }
    let (manifest, scenes) = read_dataset(&dir)?;
    if manifest.spec != cfg.dataset {
        return Err(Error::Config(format!(
            "dataset at {} was generated from a different spec",
            dir.display()
        )));
    }
    split(&scenes, cfg.train_fraction)
}

/// Run summary written next to the per-iteration CSV.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub config_digest: String,
    pub seed: u64,
    pub status: RunStatus,
    pub unstable: bool,
    pub iterations_logged: usize,
    pub initial_check: Option<crate::trainer::InitialCheck>,
    pub train_stats: ImbalanceStats,
    pub balance: BalanceReport,
}

impl RunSummary {
    fn new(record: &RunRecord, stats: &ImbalanceStats) -> RunSummary {
        RunSummary {
            config_digest: record.config_digest.clone(),
            seed: record.seed,
            status: record.status.clone(),
            unstable: record.unstable(),
            iterations_logged: record.rows.len(),
            initial_check: record.initial_check,
            train_stats: *stats,
            balance: loss_balance_report(record),
        }
    }
}

/// Trains on `train` with the config's settings.
pub fn run_training(cfg: &ExperimentConfig, train: &[Scene]) -> Result<TrainOutput> {
    Trainer::new(
        train,
        &cfg.detector_config(),
        &cfg.loss,
        &cfg.sampler,
        &cfg.schedule,
        cfg.seed,
        cfg.digest(),
    )?
    .run()
}

fn loss_plots(record: &RunRecord) -> (String, String) {
    let rows: Vec<_> = record.rows.iter().filter(|r| !r.skipped).collect();
    let pts = |f: fn(&crate::trainer::IterRow) -> f64| -> Vec<(f64, f64)> {
        rows.iter().map(|r| (r.t as f64, f(r))).collect()
    };
    let balance = Plot {
        title: "Regression vs weighted classification loss".into(),
        x_label: "iteration".into(),
        y_label: "loss".into(),
        log_y: true,
        series: vec![
            Series::new("L_reg", pts(|r| r.reg)),
            Series::new("w * L_cls", pts(|r| r.cls_weighted)),
        ],
    };
    let cls = Plot {
        title: "Raw classification loss".into(),
        x_label: "iteration".into(),
        y_label: "L_cls".into(),
        log_y: true,
        series: vec![Series::new("L_cls", pts(|r| r.cls_raw))],
    };
    (balance.render(), cls.render())
}

/// Files written by [`cmd_train`].
#[derive(Debug, Clone)]
pub struct TrainArtifacts {
    pub dir: PathBuf,
    pub summary: RunSummary,
    pub record: RunRecord,
}

/// Trains and writes `record.csv`, `record.json`, `checkpoint/` and two SVG
/// loss plots under `<out>/train`. Diverged runs still write everything.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<TrainArtifacts> {
    let (train, _) = load_splits(cfg)?;
    let out = run_training(cfg, &train)?;
    let dir = cfg.out.join(TRAIN_DIR);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut csv = Vec::new();
    out.record.write_csv(&mut csv)?;
    write_text(&dir.join("record.csv"), &String::from_utf8_lossy(&csv))?;
    let summary = RunSummary::new(&out.record, &out.stats);
    write_json(&dir.join("record.json"), &summary)?;
    save_checkpoint(&dir.join("checkpoint"), &out.detector, &out.store, Some(&out.stats))?;
    let (balance, cls) = loss_plots(&out.record);
    write_text(&dir.join("loss_balance.svg"), &balance)?;
    write_text(&dir.join("cls_loss.svg"), &cls)?;
    match &out.record.status {
        RunStatus::Completed => info!("training completed; artifacts in {}", dir.display()),
        RunStatus::Diverged { t, reason } => warn!("training diverged at t={t}: {reason}"),
    }
    Ok(TrainArtifacts {
        dir,
        summary,
        record: out.record,
    })
}

/// Files written by [`cmd_eval`].
#[derive(Debug, Clone)]
pub struct EvalArtifacts {
    pub dir: PathBuf,
    pub report: EvalReport,
    pub sweep: Vec<(ThresholdPolicy, EvalReport)>,
}

fn sweep_policies(cfg: &ExperimentConfig) -> Vec<ThresholdPolicy> {
    let mut p: Vec<ThresholdPolicy> = cfg
        .sweep
        .iter()
        .map(|&theta| ThresholdPolicy::Fixed { theta })
        .collect();
    p.push(ThresholdPolicy::Adaptive);
    p
}

/// Evaluates a checkpoint (default `<out>/train/checkpoint`) on the eval
/// split: `report.json` for the configured threshold and `sweep.csv` over the
/// sweep thresholds plus the adaptive one.
pub fn cmd_eval(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<EvalArtifacts> {
    let ckpt = checkpoint
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.out.join(TRAIN_DIR).join("checkpoint"));
    let (manifest, detector, store) = load_checkpoint(&ckpt)?;
    let (_, eval) = load_splits(cfg)?;
    let stats = manifest.train_stats.as_ref();
    let report = evaluate_model(&detector, &store, &eval, stats, &cfg.eval)?;
    let sweep = threshold_sweep(&detector, &store, &eval, stats, &sweep_policies(cfg), &cfg.eval)?;
    let dir = cfg.out.join(EVAL_DIR);
    write_json(&dir.join("report.json"), &report)?;
    let mut csv = Vec::new();
    write_sweep_csv(&sweep_rows(&sweep), &mut csv)?;
    write_text(&dir.join("sweep.csv"), &String::from_utf8_lossy(&csv))?;
    info!(
        "AP {:.1} at theta {:.4}; reports in {}",
        report.ap * 100.0,
        report.theta,
        dir.display()
    );
    Ok(EvalArtifacts { dir, report, sweep })
}

/// A rectangular table of strings with a header row and a label column.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub corner: String,
    pub columns: Vec<String>,
    pub rows: Vec<(String, Vec<String>)>,
}

impl Table {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec![self.corner.clone()];
        header.extend(self.columns.iter().cloned());
        w.write_record(&header)?;
        for (label, cells) in &self.rows {
            let mut rec = vec![label.clone()];
            rec.extend(cells.iter().cloned());
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Serde(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn from_csv(text: &str) -> Result<Table> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_reader(text.as_bytes());
        let mut records = rdr.records();
        let header = records
            .next()
            .ok_or_else(|| Error::Serde("empty table".into()))??;
        let width = header.len();
        let mut rows = Vec::new();
        for rec in records {
            let rec = rec?;
            if rec.len() != width {
                return Err(Error::Serde(format!("row has {} fields, header has {width}", rec.len())));
            }
            rows.push((rec[0].to_string(), rec.iter().skip(1).map(str::to_string).collect()));
        }
        Ok(Table {
            corner: header[0].to_string(),
            columns: header.iter().skip(1).map(str::to_string).collect(),
            rows,
        })
    }
}

/// Outcome of one grid run at one threshold policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRun {
    pub group: String,
    pub cell: String,
    pub seed: u64,
    pub policy: String,
    pub diverged: bool,
    pub unstable: bool,
    pub ap: Option<f64>,
    pub ap50: Option<f64>,
    pub ap75: Option<f64>,
}

struct Job {
    group: &'static str,
    cell: String,
    loss: LossConfig,
    seed: u64,
    policies: Vec<(String, ThresholdPolicy)>,
}

/// Mechanism ablation columns: focal baseline, guided only, optimal bias only,
/// both with a fixed threshold, the full mechanism, and the full mechanism on focal loss.
pub const ABLATION_COLUMNS: [&str; 6] = [
    "focal",
    "guided",
    "optimal_bias",
    "bias+guided",
    "sampling_free",
    "sampling_free+focal",
];

/// Fixed threshold used wherever adaptive thresholding is off.
pub const FIXED_THETA: f64 = 0.05;

/// Prior used when neither a manual prior nor the optimal bias is requested.
pub const DEFAULT_PRIOR: f64 = 0.01;

fn ablation_jobs(seed: u64) -> Vec<Job> {
    let fixed = ThresholdPolicy::Fixed { theta: FIXED_THETA };
    let adaptive = ThresholdPolicy::Adaptive;
    let ce_guided = |optimal: bool| LossConfig {
        guided: true,
        optimal_bias: optimal,
        init_pi: (!optimal).then_some(DEFAULT_PRIOR),
        ..LossConfig::default()
    };
    vec![
        Job {
            group: "ablation",
            cell: "focal".into(),
            loss: LossConfig::focal(),
            seed,
            policies: vec![("focal".into(), fixed)],
        },
        Job {
            group: "ablation",
            cell: "guided".into(),
            loss: ce_guided(false),
            seed,
            policies: vec![("guided".into(), adaptive)],
        },
        Job {
            group: "ablation",
            cell: "optimal_bias".into(),
            loss: LossConfig {
                optimal_bias: true,
                fixed_w: Some(1.0),
                ..LossConfig::default()
            },
            seed,
            policies: vec![("optimal_bias".into(), adaptive)],
        },
        Job {
            group: "ablation",
            cell: "sampling_free".into(),
            loss: ce_guided(true),
            seed,
            policies: vec![("bias+guided".into(), fixed), ("sampling_free".into(), adaptive)],
        },
        Job {
            group: "ablation",
            cell: "sampling_free+focal".into(),
            loss: LossConfig {
                cls: ClsVariant::focal_default(),
                ..ce_guided(true)
            },
            seed,
            policies: vec![("sampling_free+focal".into(), adaptive)],
        },
    ]
}

fn grid_loss(pi: PiChoice, w: WeightChoice) -> LossConfig {
    let mut loss = LossConfig::default();
    match pi {
        PiChoice::Prior(p) => loss.init_pi = Some(p),
        PiChoice::Named(PiName::Optimal) => loss.optimal_bias = true,
    }
    match w {
        WeightChoice::Fixed(v) => loss.fixed_w = Some(v),
        WeightChoice::Named(WeightName::Guided) => loss.guided = true,
    }
    loss
}

fn run_job(cfg: &ExperimentConfig, train: &[Scene], eval: &[Scene], job: &Job) -> Result<Vec<GridRun>> {
    let run_cfg = cfg.with_loss(job.loss.clone(), job.seed);
    run_cfg.validate()?;
    let out = run_training(&run_cfg, train)?;
    let diverged = out.record.diverged();
    let unstable = out.record.unstable();
    let mut runs = Vec::new();
    for (label, policy) in &job.policies {
        let report = if diverged {
            None
        } else {
            let ec = EvalConfig {
                threshold: *policy,
                ..cfg.eval.clone()
            };
            Some(evaluate_model(&out.detector, &out.store, eval, Some(&out.stats), &ec)?)
        };
        runs.push(GridRun {
            group: job.group.into(),
            cell: label.clone(),
            seed: job.seed,
            policy: policy.label(),
            diverged,
            unstable,
            ap: report.as_ref().map(|r| r.ap),
            ap50: report.as_ref().and_then(|r| r.ap50),
            ap75: report.as_ref().and_then(|r| r.ap75),
        });
    }
    Ok(runs)
}

/// Grid outputs: the `pi x w` table, the ablation table, and every run.
#[derive(Debug, Clone)]
pub struct GridArtifacts {
    pub dir: PathBuf,
    pub table: Option<Table>,
    pub ablation: Option<Table>,
    pub runs: Vec<GridRun>,
}

fn fmt_ap(xs: &[Option<f64>]) -> String {
    if xs.is_empty() || xs.iter().any(Option::is_none) {
        return "n/a".into();
    }
    let m = xs.iter().flatten().sum::<f64>() / xs.len() as f64;
    format!("{:.1}", m * 100.0)
}

fn cell_runs<'a>(runs: &'a [GridRun], group: &str, cell: &str) -> Vec<&'a GridRun> {
    runs.iter().filter(|r| r.group == group && r.cell == cell).collect()
}

/// Runs every grid cell for every seed. A cell whose run diverges shows
/// `n/a`; a run that fails outright is logged and also shows `n/a`.
/// `parallel > 1` runs that many cells at once; results do not depend on it.
pub fn cmd_grid(cfg: &ExperimentConfig, parallel: usize) -> Result<GridArtifacts> {
    let spec = cfg
        .grid
        .as_ref()
        .ok_or_else(|| Error::Config("config has no [grid] section".into()))?;
    let grid_cells = spec.pi.len() * spec.w.len();
    if grid_cells == 0 && !spec.ablation {
        return Err(Error::Config("grid is empty: give pi and w values or enable the ablation".into()));
    }
    if grid_cells == 0 && (!spec.pi.is_empty() || !spec.w.is_empty()) {
        return Err(Error::Config("grid needs both pi and w values".into()));
    }
    let seeds = if spec.seeds.is_empty() { vec![cfg.seed] } else { spec.seeds.clone() };
    let mut jobs = Vec::new();
    for &seed in &seeds {
        for &pi in &spec.pi {
            for &w in &spec.w {
                let cell = format!("{}|{}", pi.label(), w.label());
                jobs.push(Job {
                    group: "pi_w",
                    cell: cell.clone(),
                    loss: grid_loss(pi, w),
                    seed,
                    policies: vec![(cell, cfg.eval.threshold)],
                });
            }
        }
        if spec.ablation {
            jobs.extend(ablation_jobs(seed));
        }
    }
    let (train, eval) = load_splits(cfg)?;
    let results: Vec<Mutex<Option<Vec<GridRun>>>> = jobs.iter().map(|_| Mutex::new(None)).collect();
    let next = Mutex::new(0usize);
    let work = || loop {
        let i = {
            let mut n = next.lock().expect("job counter");
            let i = *n;
            *n += 1;
            i
        };
        let Some(job) = jobs.get(i) else { break };
        info!("grid run {}/{}: {} seed {}", i + 1, jobs.len(), job.cell, job.seed);
        let runs = run_job(cfg, &train, &eval, job).unwrap_or_else(|e| {
            warn!("grid run {} seed {} failed: {e}", job.cell, job.seed);
            job.policies
                .iter()
                .map(|(label, p)| GridRun {
                    group: job.group.into(),
                    cell: label.clone(),
                    seed: job.seed,
                    policy: p.label(),
                    diverged: true,
                    unstable: true,
                    ap: None,
                    ap50: None,
                    ap75: None,
                })
                .collect()
        });
        *results[i].lock().expect("result slot") = Some(runs);
    };
    std::thread::scope(|s| {
        for _ in 0..parallel.max(1).min(jobs.len()) {
            s.spawn(work);
        }
    });
    let runs: Vec<GridRun> = results
        .into_iter()
        .flat_map(|m| m.into_inner().expect("result slot").unwrap_or_default())
        .collect();

    let table = (grid_cells > 0).then(|| Table {
        corner: "AP".into(),
        columns: spec.w.iter().map(WeightChoice::label).collect(),
        rows: spec
            .pi
            .iter()
            .map(|pi| {
                let cells = spec
                    .w
                    .iter()
                    .map(|w| {
                        let cell = format!("{}|{}", pi.label(), w.label());
                        let aps: Vec<_> = cell_runs(&runs, "pi_w", &cell).iter().map(|r| r.ap).collect();
                        fmt_ap(&aps)
                    })
                    .collect();
                (pi.label(), cells)
            })
            .collect(),
    });
    let ablation = spec.ablation.then(|| {
        let col = |f: &dyn Fn(&[&GridRun]) -> String| -> Vec<String> {
            ABLATION_COLUMNS
                .iter()
                .map(|c| f(&cell_runs(&runs, "ablation", c)))
                .collect()
        };
        let flags = |on: [bool; 6]| on.iter().map(|&b| if b { "yes" } else { "no" }.to_string()).collect();
        let count = |pred: fn(&GridRun) -> bool| {
            col(&|rs: &[&GridRun]| format!("{}/{}", rs.iter().filter(|r| pred(r)).count(), rs.len()))
        };
        Table {
            corner: "metric".into(),
            columns: ABLATION_COLUMNS.iter().map(|s| s.to_string()).collect(),
            rows: vec![
                ("optimal_bias".into(), flags([false, false, true, true, true, true])),
                ("guided".into(), flags([false, true, false, true, true, true])),
                ("adaptive".into(), flags([false, true, true, false, true, true])),
                ("focal".into(), flags([true, false, false, false, false, true])),
                ("AP".into(), col(&|rs| fmt_ap(&rs.iter().map(|r| r.ap).collect::<Vec<_>>()))),
                ("AP50".into(), col(&|rs| fmt_ap(&rs.iter().map(|r| r.ap50).collect::<Vec<_>>()))),
                ("AP75".into(), col(&|rs| fmt_ap(&rs.iter().map(|r| r.ap75).collect::<Vec<_>>()))),
                ("diverged".into(), count(|r| r.diverged)),
                ("unstable".into(), count(|r| r.unstable)),
            ],
        }
    });

    let dir = cfg.out.join(GRID_DIR);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    if let Some(t) = &table {
        write_text(&dir.join("grid.csv"), &t.to_csv()?)?;
    }
    if let Some(t) = &ablation {
        write_text(&dir.join("ablation.csv"), &t.to_csv()?)?;
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &runs {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Serde(e.to_string()))?;
    write_text(&dir.join("runs.csv"), &String::from_utf8_lossy(&bytes))?;
    Ok(GridArtifacts {
        dir,
        table,
        ablation,
        runs,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyticValue {
    pub row: AnalyticRow,
    pub ratio: f64,
    pub num_classes: usize,
    pub value: f64,
}

/// Imbalance statistics and closed-form values, computed without training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Analysis {
    pub num_scenes: usize,
    pub num_classes: usize,
    pub anchors_per_scene: usize,
    pub n: u64,
    pub n_fg: u64,
    pub n_ignore: u64,
    pub ratio: f64,
    /// `N / N_f` when ignore-band anchors are left out of `N`.
    pub ratio_without_ignore: f64,
    pub optimal_pi: f64,
    pub optimal_bias: f64,
    pub adaptive_theta: f64,
    pub ignore_in_n: bool,
    pub initial_losses: Vec<AnalyticValue>,
}

impl Analysis {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "scenes {}  classes {}  anchors/scene {}\n\
             N {}  N_f {}  ignore {}\n\
             N/N_f {:.3} (ignore-band anchors {} N; {:.3} otherwise)\n\
             optimal pi {:.6e}  bias {:.6}\n\
             adaptive theta {:.6e}\n\
             initial losses:\n",
            self.num_scenes,
            self.num_classes,
            self.anchors_per_scene,
            self.n,
            self.n_fg,
            self.n_ignore,
            self.ratio,
            if self.ignore_in_n { "in" } else { "not in" },
            self.ratio_without_ignore,
            self.optimal_pi,
            self.optimal_bias,
            self.adaptive_theta,
        );
        for v in &self.initial_losses {
            let name = match v.row.loss {
                AnalyticLoss::Focal { alpha, gamma } => format!("focal(alpha={alpha}, gamma={gamma})"),
                AnalyticLoss::Ce { w } => format!("ce(w={w})"),
            };
            s.push_str(&format!(
                "  {name:<28} pi={:<10e} ratio={:<10.3} C={:<3} -> {:.4}\n",
                v.row.pi, v.ratio, v.num_classes, v.value
            ));
        }
        s
    }
}

/// Statistics of the training split under the config's anchors, the optimal
/// prior and bias, the adaptive threshold, and the configured closed-form rows.
/// Writes `analysis.json` and `analysis.txt` under `out`.
pub fn cmd_analyze(cfg: &ExperimentConfig) -> Result<Analysis> {
    let (train, _) = load_splits(cfg)?;
    let analysis = analyze(cfg, &train)?;
    write_json(&cfg.out.join("analysis.json"), &analysis)?;
    write_text(&cfg.out.join("analysis.txt"), &analysis.to_text())?;
    Ok(analysis)
}

pub fn analyze(cfg: &ExperimentConfig, train: &[Scene]) -> Result<Analysis> {
    let first = train
        .first()
        .ok_or_else(|| Error::Config("training split is empty".into()))?;
    let detector = Detector::new(cfg.detector_config(), first.height, first.width)?;
    let a = &cfg.anchors;
    let matches = train
        .iter()
        .map(|s| match_anchors(&detector.anchors, s, a.fg_thresh, a.bg_thresh))
        .collect::<Result<Vec<_>>>()?;
    let stats = ImbalanceStats::from_matches(&matches, a.ignore_in_n)?;
    let other = ImbalanceStats::from_matches(&matches, !a.ignore_in_n)?;
    let c = cfg.dataset.num_classes;
    let (pi, b) = optimal_bias(stats.n_total as f64, stats.n_fg_total as f64, c)?;
    let initial_losses = cfg
        .analytic
        .iter()
        .map(|row| {
            let ratio = row.ratio.unwrap_or(stats.ratio);
            let num_classes = row.num_classes.unwrap_or(c);
            AnalyticValue {
                row: *row,
                ratio,
                num_classes,
                value: initial_loss_analytic(row.loss, row.pi, ratio, num_classes),
            }
        })
        .collect();
    Ok(Analysis {
        num_scenes: train.len(),
        num_classes: c,
        anchors_per_scene: detector.num_anchors(),
        n: stats.n_total,
        n_fg: stats.n_fg_total,
        n_ignore: stats.n_ignore_total,
        ratio: stats.ratio,
        ratio_without_ignore: if a.ignore_in_n { other.ratio } else { stats.ratio },
        optimal_pi: pi,
        optimal_bias: b,
        adaptive_theta: stats.fg_fraction(),
        ignore_in_n: a.ignore_in_n,
        initial_losses,
    })
}
