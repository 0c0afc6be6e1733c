use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::error;
use samplefree::experiment::{cmd_analyze, cmd_eval, cmd_generate, cmd_grid, cmd_train, ExperimentConfig};
use samplefree::trainer::RunStatus;
use samplefree::Error;

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_DIVERGED: u8 = 3;

#[derive(Parser)]
#[command(name = "samplefree", version, about = "Sampling-free dense detection laboratory")]
struct Cli {
    /// Experiment config (TOML); built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory, overriding the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset.
    Generate {
        /// Overwrite an existing dataset.
        #[arg(long)]
        force: bool,
    },
    /// Train one model and write its run record, plots and checkpoint.
    Train {
        /// Exit with status 3 when the run diverges.
        #[arg(long)]
        strict: bool,
    },
    /// Evaluate a checkpoint on the eval split.
    Eval {
        /// Checkpoint directory; defaults to the one `train` writes.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run the grid described by the config's [grid] section.
    Grid {
        /// Number of grid cells trained concurrently.
        #[arg(long, default_value_t = 1)]
        parallel: usize,
    },
    /// Print imbalance statistics and closed-form initial losses.
    Analyze,
    /// Print the effective config as TOML.
    Config,
}

fn load_config(cli: &Cli) -> samplefree::Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> samplefree::Result<u8> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Generate { force } => {
            let m = cmd_generate(&cfg, *force)?;
            println!("dataset {} ({} scenes) in {}", m.dataset_digest, m.scenes.len(), cfg.data_dir().display());
        }
        Command::Train { strict } => {
            let a = cmd_train(&cfg)?;
            match &a.summary.status {
                RunStatus::Completed => println!("completed"),
                RunStatus::Diverged { t, reason } => println!("diverged at t={t}: {reason}"),
            }
            println!("artifacts in {}", a.dir.display());
            if *strict && matches!(a.summary.status, RunStatus::Diverged { .. }) {
                return Ok(EXIT_DIVERGED);
            }
        }
        Command::Eval { checkpoint } => {
            let a = cmd_eval(&cfg, checkpoint.as_deref())?;
            println!("policy,theta,ap,ap50,ap75,survivors");
            for (p, r) in &a.sweep {
                let pct = |x: Option<f64>| x.map_or("n/a".to_string(), |v| format!("{:.2}", v * 100.0));
                println!(
                    "{},{:.6},{:.2},{},{},{}",
                    p.label(),
                    r.theta,
                    r.ap * 100.0,
                    pct(r.ap50),
                    pct(r.ap75),
                    r.survivors
                );
            }
            println!("reports in {}", a.dir.display());
        }
        Command::Grid { parallel } => {
            let a = cmd_grid(&cfg, *parallel)?;
            for t in a.table.iter().chain(a.ablation.iter()) {
                print!("{}", t.to_csv()?);
                println!();
            }
            println!("tables in {}", a.dir.display());
        }
        Command::Analyze => {
            let a = cmd_analyze(&cfg)?;
            print!("{}", a.to_text());
        }
        Command::Config => print!("{}", cfg.to_toml()?),
    }
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) => EXIT_CONFIG,
                _ => EXIT_FAILURE,
            })
        }
    }
}
