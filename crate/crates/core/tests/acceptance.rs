//! Acceptance criteria 1-10, one PASS/FAIL line each.
//!
//! Criteria 5-8 and 10 train on the full benchmark and take several minutes.
//! `ACCEPTANCE_ONLY=<n>` runs one criterion; `ACCEPTANCE_STRICT=1` exits
//! nonzero when any criterion fails.

mod common;

use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use common::{
    ap_oracle, ce_initial, check_biased, fixture, grad_err_ce, grad_err_focal, grad_err_ghmc, grad_err_guided,
    grad_err_smooth_l1, grid_search_pi, nms_ref, ohem_ref, rand_dets, rand_match, to_detections, uniform_batch,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use samplefree::eval::{coco_iou_thresholds, evaluate, nms, threshold_sweep, EvalConfig, EvalReport, ThresholdPolicy};
use samplefree::experiment::{
    analyze, cmd_analyze, cmd_eval, cmd_generate, cmd_grid, cmd_train, run_training, ExperimentConfig, GridSpec, PiChoice,
    Analysis, PiName, WeightChoice, WeightName,
};
use samplefree::losses::{ce_terms, ghmc_loss, initial_loss_analytic, optimal_bias, AnalyticLoss, GhmNormalizer, GhmState, LossConfig};
use samplefree::sampler::{biased_sample, ohem_select};
use samplefree::scenes::{generate, split, Scene};
use samplefree::trainer::RunRecord;

struct Verdict {
    id: u32,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn verdict(id: u32, name: &'static str, pass: bool, detail: String) -> Verdict {
    let v = Verdict { id, name, pass, detail };
    println!(
        "criterion {:>2} {} {}: {}",
        v.id,
        if v.pass { "PASS" } else { "FAIL" },
        v.name,
        v.detail
    );
    v
}

fn criterion_1() -> Verdict {
    let start = Instant::now();
    let v = initial_loss_analytic(AnalyticLoss::Focal { alpha: 0.25, gamma: 2.0 }, 1e-2, 1e3, 80);
    let ms = start.elapsed().as_secs_f64() * 1e3;
    let pass = (v - 1.19).abs() <= 0.01 && ms < 1.0;
    verdict(1, "analytic initial focal loss", pass, format!("{v:.4} (expected 1.19 +- 0.01) in {ms:.4} ms"))
}

fn criterion_2() -> Verdict {
    let start = Instant::now();
    let v = initial_loss_analytic(AnalyticLoss::Ce { w: 0.1 }, 1e-5, 1e3, 80);
    let ms = start.elapsed().as_secs_f64() * 1e3;
    let direct = ce_initial(1e-5, 1e3, 80, 0.1);
    let pass = (v - 1.23).abs() <= 0.01 && ms < 1.0 && (v - direct).abs() <= 1e-12 * direct;
    verdict(
        2,
        "analytic initial weighted CE",
        pass,
        format!("{v:.4} (expected 1.23 +- 0.01, unit-sum oracle {direct:.4}) in {ms:.4} ms"),
    )
}

fn criterion_3() -> Verdict {
    let start = Instant::now();
    let (pi, _) = optimal_bias(1e3, 1.0, 80).unwrap();
    let exact = pi == 1.25e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_steps: f64 = 0.0;
    for _ in 0..20 {
        let n_fg = rng.random_range(1..1000) as f64;
        let n = n_fg * rng.random_range(2.0..5000.0);
        let c = rng.random_range(1..100);
        let (pi, _) = optimal_bias(n, n_fg, c).unwrap();
        let (best, step) = grid_search_pi(n / n_fg, c, 100_000, 1e-9, 0.5);
        worst_steps = worst_steps.max((pi.ln() - best.ln()).abs() / step);
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = exact && worst_steps <= 1.0 && secs < 5.0;
    verdict(
        3,
        "optimal bias",
        pass,
        format!("pi(1e3, 80) = {pi:e}; 20 triples within {worst_steps:.3} grid steps of a 1e5-point search; {secs:.2} s"),
    )
}

fn criterion_4() -> Verdict {
    let start = Instant::now();
    let suites: [(&str, fn(u64) -> f64); 5] = [
        ("ce", grad_err_ce),
        ("focal", grad_err_focal),
        ("smooth-l1", grad_err_smooth_l1),
        ("ghm-c", grad_err_ghmc),
        ("guided", grad_err_guided),
    ];
    let mut parts = Vec::new();
    let mut pass = true;
    for (name, f) in suites {
        let worst = (0..50).map(f).fold(0.0, f64::max);
        pass &= worst < 1e-4;
        parts.push(format!("{name} {worst:.1e}"));
    }
    let secs = start.elapsed().as_secs_f64();
    pass &= secs < 120.0;
    verdict(
        4,
        "gradient suite",
        pass,
        format!("worst relative error over 50 batches: {}; {secs:.2} s", parts.join(", ")),
    )
}

/// One benchmark training run and its threshold sweep.
struct Outcome {
    seed: u64,
    record: RunRecord,
    /// AP reports at theta 0, 0.05 and adaptive; `None` for diverged runs.
    reports: Option<[EvalReport; 3]>,
}

impl Outcome {
    fn diverged(&self) -> bool {
        self.record.diverged()
    }

    fn unstable(&self) -> bool {
        self.record.unstable()
    }

    fn ap(&self, k: usize) -> f64 {
        self.reports.as_ref().map_or(f64::NAN, |r| 100.0 * r[k].ap)
    }

    fn ap50(&self, k: usize) -> f64 {
        self.reports.as_ref().map_or(f64::NAN, |r| 100.0 * r[k].ap50.unwrap())
    }
}

const AT_ZERO: usize = 0;
const AT_FIXED: usize = 1;
const ADAPTIVE: usize = 2;

struct Bench {
    cfg: ExperimentConfig,
    train: Vec<Scene>,
    eval: Vec<Scene>,
}

impl Bench {
    fn new() -> Bench {
        let cfg = ExperimentConfig::default();
        let scenes = generate(&cfg.dataset).unwrap();
        let (train, eval) = split(&scenes, cfg.train_fraction).unwrap();
        Bench { cfg, train, eval }
    }

    fn run(&self, loss: &LossConfig, seed: u64) -> Outcome {
        let cfg = ExperimentConfig {
            loss: loss.clone(),
            seed,
            ..self.cfg.clone()
        };
        let out = run_training(&cfg, &self.train).unwrap();
        let reports = (!out.record.diverged()).then(|| {
            let policies = [
                ThresholdPolicy::Fixed { theta: 0.0 },
                ThresholdPolicy::Fixed { theta: 0.05 },
                ThresholdPolicy::Adaptive,
            ];
            let sweep =
                threshold_sweep(&out.detector, &out.store, &self.eval, Some(&out.stats), &policies, &EvalConfig::default())
                    .unwrap();
            let r: Vec<EvalReport> = sweep.into_iter().map(|(_, r)| r).collect();
            [r[0].clone(), r[1].clone(), r[2].clone()]
        });
        Outcome {
            seed,
            record: out.record,
            reports,
        }
    }

    fn runs(&self, label: &str, loss: &LossConfig, seeds: &[u64]) -> Vec<Outcome> {
        seeds
            .iter()
            .map(|&s| {
                let t = Instant::now();
                let o = self.run(loss, s);
                eprintln!(
                    "  {label} seed {s}: {} unstable={} AP(adaptive)={:.2} AP50(adaptive)={:.2} [{:.0} s]",
                    if o.diverged() { "diverged" } else { "completed" },
                    o.unstable(),
                    o.ap(ADAPTIVE),
                    o.ap50(ADAPTIVE),
                    t.elapsed().as_secs_f64()
                );
                o
            })
            .collect()
    }
}

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const PARITY_SEEDS: usize = 3;

struct Runs {
    sf: Vec<Outcome>,
    ce: Vec<Outcome>,
    guided: Vec<Outcome>,
    bias: Vec<Outcome>,
    focal: Vec<Outcome>,
    stability_secs: f64,
    analysis: Analysis,
}

fn zero_bias_ce() -> LossConfig {
    LossConfig {
        fixed_w: Some(1.0),
        ..LossConfig::default()
    }
}

fn guided_only() -> LossConfig {
    LossConfig {
        guided: true,
        init_pi: Some(0.01),
        ..LossConfig::default()
    }
}

fn bias_only() -> LossConfig {
    LossConfig {
        optimal_bias: true,
        fixed_w: Some(1.0),
        ..LossConfig::default()
    }
}

fn train_all(bench: &Bench) -> Runs {
    let start = Instant::now();
    let sf = bench.runs("sampling-free", &LossConfig::sampling_free(), &SEEDS);
    let ce = bench.runs("ce zero-bias w=1", &zero_bias_ce(), &SEEDS);
    let guided = bench.runs("guided only", &guided_only(), &SEEDS);
    let bias = bench.runs("optimal bias only", &bias_only(), &SEEDS);
    let stability_secs = start.elapsed().as_secs_f64();
    let focal = bench.runs("focal", &LossConfig::focal(), &SEEDS[..PARITY_SEEDS]);
    Runs {
        sf,
        ce,
        guided,
        bias,
        focal,
        stability_secs,
        analysis: analyze(&bench.cfg, &bench.train).unwrap(),
    }
}

fn criterion_5(runs: &Runs) -> Verdict {
    let mut worst: f64 = 0.0;
    let mut worst_batch: f64 = 0.0;
    let mut parts = Vec::new();
    for o in &runs.sf {
        let chk = o.record.initial_check.expect("initial check recorded");
        worst = worst.max(chk.rel_err_dataset());
        worst_batch = worst_batch.max(chk.rel_err_batch());
        parts.push(format!("seed {} {:.4}/{:.4}", o.seed, chk.measured_ce, chk.analytic_dataset));
    }
    verdict(
        5,
        "measured vs analytic initial CE",
        worst <= 0.05,
        format!(
            "worst relative gap {:.2}% with dataset N/N_f (measured/analytic: {}); {:.2}% with each batch's own N/N_f",
            100.0 * worst,
            parts.join(", "),
            100.0 * worst_batch
        ),
    )
}

fn criterion_6(runs: &Runs) -> Verdict {
    let sf_done = runs.sf.iter().filter(|o| !o.diverged()).count();
    let mut a_ok = 0;
    for (ce, sf) in runs.ce.iter().zip(&runs.sf) {
        if ce.diverged() || ce.ap50(ADAPTIVE) <= sf.ap50(ADAPTIVE) - 20.0 {
            a_ok += 1;
        }
    }
    let ce_div = runs.ce.iter().filter(|o| o.diverged()).count();
    let count = |v: &[Outcome]| v.iter().filter(|o| o.unstable()).count();
    let (g_bad, b_bad) = (count(&runs.guided), count(&runs.bias));
    let a = a_ok == SEEDS.len();
    let b = g_bad.max(b_bad) >= 3;
    let c = sf_done == SEEDS.len();
    let t = runs.stability_secs <= 1800.0;
    let ap = |v: &[Outcome]| {
        v.iter()
            .map(|o| if o.diverged() { "n/a".to_string() } else { format!("{:.1}", o.ap(ADAPTIVE)) })
            .collect::<Vec<_>>()
            .join("/")
    };
    verdict(
        6,
        "stability contrast",
        a && b && c && t,
        format!(
            "(a) {} zero-bias CE {a_ok}/5 diverged or >=20 AP50 below, {ce_div}/5 diverged; \
             (b) {} unstable-or-diverged: guided only {g_bad}/5, optimal bias only {b_bad}/5 \
             (AP {} and {}); (c) {} sampling-free completed {sf_done}/5; {:.0} s {}",
            ok(a),
            ok(b),
            ap(&runs.guided),
            ap(&runs.bias),
            ok(c),
            runs.stability_secs,
            if t { "within 30 min" } else { "over 30 min" }
        ),
    )
}

fn ok(b: bool) -> &'static str {
    if b {
        "ok"
    } else {
        "not met"
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn criterion_7(runs: &Runs) -> Verdict {
    let sf = &runs.sf[..PARITY_SEEDS];
    let sf_ap = mean(sf.iter().map(|o| o.ap(ADAPTIVE)));
    let sf_ap50 = mean(sf.iter().map(|o| o.ap50(ADAPTIVE)));
    let fl_ap = mean(runs.focal.iter().map(|o| o.ap(AT_FIXED)));
    let fl_ap50 = mean(runs.focal.iter().map(|o| o.ap50(AT_FIXED)));
    let gap = sf_ap - fl_ap;
    let pass = gap.abs() <= 2.0 && sf_ap50 > 60.0 && fl_ap50 > 60.0;
    verdict(
        7,
        "parity with focal loss",
        pass,
        format!(
            "3-seed mean AP sampling-free {sf_ap:.2} (AP50 {sf_ap50:.2}) vs focal {fl_ap:.2} (AP50 {fl_ap50:.2}); gap {gap:+.2}"
        ),
    )
}

fn criterion_8(runs: &Runs) -> Verdict {
    let sf = &runs.sf[..PARITY_SEEDS];
    let at = |v: &[Outcome], k| mean(v.iter().map(|o| o.ap(k)));
    let (s0, s5, sa) = (at(sf, AT_ZERO), at(sf, AT_FIXED), at(sf, ADAPTIVE));
    let (f5, fa) = (at(&runs.focal, AT_FIXED), at(&runs.focal, ADAPTIVE));
    let theta = runs.sf[0].reports.as_ref().map_or(f64::NAN, |r| r[ADAPTIVE].theta);
    let pass = sa >= s5 && sa >= s0 - 0.3 && (f5 - fa).abs() <= 0.3;
    verdict(
        8,
        "adaptive thresholding",
        pass,
        format!(
            "theta_adaptive {theta:.5} ({:.5} with ignore-band anchors left out of N); sampling-free AP theta=0 {s0:.2}, 0.05 {s5:.2}, adaptive {sa:.2}; \
             focal 0.05 {f5:.2}, adaptive {fa:.2} (3-seed means)",
            1.0 / runs.analysis.ratio_without_ignore
        ),
    )
}

fn criterion_9() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut ohem_ok = 0;
    for _ in 0..1000 {
        let n = rng.random_range(0..200);
        let losses: Vec<f64> = (0..n)
            .map(|_| match rng.random_range(0..50) {
                0 => f64::NAN,
                1..=20 => rng.random_range(0..8) as f64 * 0.5,
                _ => rng.random_range(0.0..10.0),
            })
            .collect();
        let k = rng.random_range(0..n + 5);
        ohem_ok += (ohem_select(&losses, k) == ohem_ref(&losses, k)) as usize;
    }
    let mut biased_ok = 0;
    let mut biased_total = 0;
    for _ in 0..1000 {
        let m = rand_match(&mut rng);
        if m.fg_indices.is_empty() && m.n_background() == 0 {
            continue;
        }
        let batch = rng.random_range(2..400);
        let frac = rng.random_range(0.05..0.95);
        let s = biased_sample(&m, batch, frac, &mut rng).unwrap();
        biased_total += 1;
        biased_ok += check_biased(&m, batch, frac, &s).is_ok() as usize;
    }
    let mut ghm_worst: f64 = 0.0;
    for _ in 0..100 {
        let bins = rng.random_range(1..40);
        let batch = uniform_batch(bins, rng.random_range(1..6), &mut rng);
        let mut st = GhmState::new(bins, 0.0).unwrap();
        let g = ghmc_loss(&batch, &mut st, GhmNormalizer::Units).unwrap().item().unwrap();
        let mean_ce = ce_terms(&batch).data().iter().sum::<f64>() / batch.num_units() as f64;
        ghm_worst = ghm_worst.max((g - mean_ce).abs());
    }
    let mut nms_ok = 0;
    let mut nms_total = 0;
    for _ in 0..20 {
        let dets = rand_dets(&mut rng, 200, 3);
        for thr in [0.3, 0.5, 0.7] {
            let expect: Vec<_> = nms_ref(&dets, thr).iter().map(|&i| dets[i]).collect();
            nms_total += 1;
            nms_ok += (nms(&to_detections(&dets), thr) == to_detections(&expect)) as usize;
        }
    }
    let ious = coco_iou_thresholds();
    let mut ap_worst: f64 = 0.0;
    let mut fixtures = 0;
    for seed in 0..40 {
        let (scenes, dets) = fixture(seed, 1 + seed as usize % 10, 3);
        if scenes.iter().all(|s| s.gt_boxes.is_empty()) {
            continue;
        }
        fixtures += 1;
        let r = evaluate(&scenes, &dets, 3, 0.0, &ious).unwrap();
        for (k, &t) in ious.iter().enumerate() {
            for (o, c) in ap_oracle(&scenes, &dets, 3, t).iter().zip(&r.per_class) {
                ap_worst = ap_worst.max((o - c.ap[k]).abs());
            }
        }
    }
    let pass = ohem_ok == 1000
        && biased_ok == biased_total
        && ghm_worst <= 1e-9
        && nms_ok == nms_total
        && ap_worst <= 1e-9;
    verdict(
        9,
        "baseline oracles",
        pass,
        format!(
            "OHEM {ohem_ok}/1000 equal to full sort; biased sampling {biased_ok}/{biased_total} within rules; \
             GHM-C uniform bins vs mean CE {ghm_worst:.1e}; NMS {nms_ok}/{nms_total} equal to brute force; \
             AP worst gap {ap_worst:.1e} on {fixtures} fixtures"
        ),
    )
}

const TINY: &str = r#"
schema_version = 1
seed = 3

[dataset]
num_scenes = 16
height = 32
width = 32
num_classes = 2
objects_per_scene = [1, 2]
object_size = [8, 14]
seed = 11

[detector]
channels = [4, 8, 8]
head_depth = 1

[schedule]
iterations = 8
learning_rate = 0.05
batch_scenes = 2
"#;

/// Every artifact file under `dir`, keyed by relative path, with wall-time
/// fields removed.
fn artifacts(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
                continue;
            }
            let rel = p.strip_prefix(dir).unwrap().display().to_string();
            let bytes = fs::read(&p).unwrap();
            let bytes = if rel.ends_with("report.json") {
                let mut v: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
                v.as_object_mut().unwrap().remove("ms_per_scene");
                serde_json::to_vec(&v).unwrap()
            } else if rel.ends_with("sweep.csv") {
                let text = String::from_utf8(bytes).unwrap();
                text.lines()
                    .map(|l| l.rsplit_once(',').map_or(l, |x| x.0).to_string() + "\n")
                    .collect::<String>()
                    .into_bytes()
            } else {
                bytes
            };
            out.push((rel, bytes));
        }
    }
    out.sort();
    out
}

fn run_all_commands(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut cfg = ExperimentConfig::from_toml(TINY).unwrap();
    cfg.out = root.join("out");
    cfg.grid = Some(GridSpec {
        pi: vec![PiChoice::Prior(0.5), PiChoice::Named(PiName::Optimal)],
        w: vec![WeightChoice::Fixed(1.0), WeightChoice::Named(WeightName::Guided)],
        ablation: true,
        seeds: vec![1, 2],
    });
    cmd_generate(&cfg, false).unwrap();
    cmd_train(&cfg).unwrap();
    cmd_eval(&cfg, None).unwrap();
    cmd_analyze(&cfg).unwrap();
    cmd_grid(&cfg, 2).unwrap();
    artifacts(&cfg.out)
}

fn criterion_10(bench: &Bench, runs: &Runs) -> Verdict {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = run_all_commands(a.path());
    let second = run_all_commands(b.path());
    let differing: Vec<&str> = first
        .iter()
        .zip(&second)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.as_str())
        .collect();
    let same_files = first.len() == second.len() && first.iter().zip(&second).all(|(x, y)| x.0 == y.0);
    let rerun = bench.run(&LossConfig::sampling_free(), SEEDS[0]);
    let orig = &runs.sf[0];
    let record_same = rerun.record == orig.record;
    let untimed = |o: &Outcome| -> Vec<String> {
        o.reports
            .iter()
            .flatten()
            .map(|r| r.to_json_untimed().unwrap())
            .collect()
    };
    let reports_same = untimed(&rerun) == untimed(orig);
    let pass = same_files && differing.is_empty() && record_same && reports_same;
    verdict(
        10,
        "determinism",
        pass,
        format!(
            "{} artifact files from generate/train/eval/analyze/grid, {} differing{}; \
             benchmark rerun record identical: {record_same}, reports identical: {reports_same}",
            first.len(),
            differing.len(),
            if differing.is_empty() { String::new() } else { format!(" ({})", differing.join(", ")) }
        ),
    )
}

fn main() -> ExitCode {
    let filter: Option<u32> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|s| s.parse().ok());
    let wanted = |id: u32| filter.is_none_or(|f| f == id);
    let mut verdicts = Vec::new();
    if wanted(1) {
        verdicts.push(criterion_1());
    }
    if wanted(2) {
        verdicts.push(criterion_2());
    }
    if wanted(3) {
        verdicts.push(criterion_3());
    }
    if wanted(4) {
        verdicts.push(criterion_4());
    }
    if wanted(9) {
        verdicts.push(criterion_9());
    }
    if (5..=8).any(wanted) || wanted(10) {
        let bench = Bench::new();
        eprintln!("training benchmark runs ({} train / {} eval scenes)", bench.train.len(), bench.eval.len());
        let runs = train_all(&bench);
        for (id, f) in [
            (5, criterion_5 as fn(&Runs) -> Verdict),
            (6, criterion_6),
            (7, criterion_7),
            (8, criterion_8),
        ] {
            if wanted(id) {
                verdicts.push(f(&runs));
            }
        }
        if wanted(10) {
            verdicts.push(criterion_10(&bench, &runs));
        }
    }
    verdicts.sort_by_key(|v| v.id);
    let failed: Vec<String> = verdicts.iter().filter(|v| !v.pass).map(|v| v.id.to_string()).collect();
    println!("acceptance: {}/{} criteria pass", verdicts.len() - failed.len(), verdicts.len());
    if failed.is_empty() {
        return ExitCode::SUCCESS;
    }
    println!("failing: {}", failed.join(", "));
    if std::env::var_os("ACCEPTANCE_STRICT").is_some() {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
