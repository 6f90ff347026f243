use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use linkadapt_core::config::{ExperimentConfig, Scheme};
use linkadapt_core::env::records_to_csv;
use linkadapt_core::experiment::{
    self, epochs_to_csv, mcs_histogram, mcs_to_csv, sweep_to_csv, BoxedPolicy, RunSummary, SweepAxis,
};
use linkadapt_core::td3::Td3Checkpoint;

/// Scheduling and link adaptation experiments.
#[derive(Parser, Debug)]
#[command(name = "linkadapt", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// key = value config file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. --set rho=0.95 (repeatable)
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    scheme: Option<Scheme>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    /// Restrict rates to MCS indices 8..=24
    #[arg(long, global = true)]
    discrete_mcs: bool,
    /// Output directory
    #[arg(long, global = true, env = "LINKADAPT_OUT_DIR", default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one scheme; writes the training curve and, for learning schemes, a checkpoint
    Train,
    /// Evaluate schemes on the test channel and print a summary table
    Eval {
        /// Load the proposed/td3 agent instead of training it
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated schemes (defaults to --scheme)
        #[arg(long, value_delimiter = ',')]
        schemes: Vec<Scheme>,
    },
    /// Train and evaluate over a grid of device counts or BLER thresholds
    Sweep {
        #[arg(long)]
        axis: SweepAxis,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long, value_delimiter = ',')]
        schemes: Vec<Scheme>,
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Violation statistics per optimal MCS index
    McsHistogram {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            ExperimentConfig::parse(&text)?
        }
        None => ExperimentConfig::default(),
    };
    for o in &c.overrides {
        let (k, v) = o.split_once('=').with_context(|| format!("--set expects KEY=VALUE, got {o:?}"))?;
        cfg.set(k, v)?;
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(s) = c.scheme {
        cfg.scheme = s;
    }
    if let Some(e) = c.epochs {
        cfg.epochs = e;
    }
    if c.discrete_mcs {
        cfg.discrete_mcs = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

fn tag(cfg: &ExperimentConfig) -> String {
    format!("{}_seed{}", cfg.scheme, cfg.seed)
}

fn trained_policy(cfg: &ExperimentConfig, checkpoint: Option<&Path>, out: &Path) -> Result<BoxedPolicy> {
    if let Some(path) = checkpoint {
        if !matches!(cfg.scheme, Scheme::Proposed | Scheme::Td3) {
            bail!("checkpoints only exist for the proposed and td3 schemes");
        }
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cp: Td3Checkpoint = serde_json::from_str(&text).context("parsing checkpoint")?;
        return Ok(experiment::policy_from_checkpoint(cfg, cp)?);
    }
    let mut policy = experiment::build_policy(cfg)?;
    let curve = experiment::train(cfg, policy.as_mut())?;
    write(out, &format!("train_{}.csv", tag(cfg)), &epochs_to_csv(&curve))?;
    Ok(policy)
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let base = load_config(&cli.common)?;
    let out = cli.common.out.as_path();
    match cli.command {
        Command::Train => {
            let mut policy = experiment::build_policy(&base)?;
            let curve = experiment::train(&base, policy.as_mut())?;
            let p = write(out, &format!("train_{}.csv", tag(&base)), &epochs_to_csv(&curve))?;
            println!("training curve: {}", p.display());
            if let Some(cp) = policy.checkpoint() {
                let p = write(out, &format!("checkpoint_{}.json", tag(&base)), &serde_json::to_string(&cp)?)?;
                println!("checkpoint: {}", p.display());
            }
            write(out, &format!("config_{}.txt", tag(&base)), &base.to_text())?;
        }
        Command::Eval { checkpoint, schemes } => {
            let schemes = if schemes.is_empty() { vec![base.scheme] } else { schemes };
            println!("{:<10} {:>10} {:>10} {:>9}", "scheme", "sum_rate", "bler", "exceeded");
            for s in schemes {
                let cfg = ExperimentConfig { scheme: s, ..base.clone() };
                let cp = checkpoint.as_deref().filter(|_| matches!(s, Scheme::Proposed | Scheme::Td3));
                let mut policy = trained_policy(&cfg, cp, out)?;
                let r = experiment::evaluate(&cfg, policy.as_mut())?;
                write(out, &format!("slots_{}.csv", tag(&cfg)), &records_to_csv(&r.records))?;
                let summary = RunSummary::new(&cfg, &r.summary);
                write(out, &format!("metrics_{}.json", tag(&cfg)), &serde_json::to_string_pretty(&summary)?)?;
                println!(
                    "{:<10} {:>10.4} {:>10.4} {:>9}",
                    s, r.summary.sum_rate, r.summary.avg_bler, r.summary.exceeded
                );
            }
        }
        Command::Sweep { axis, values, schemes, seeds } => {
            let schemes = if schemes.is_empty() { vec![base.scheme] } else { schemes };
            let seeds = if seeds.is_empty() { vec![base.seed] } else { seeds };
            let rows = experiment::sweep(&base, axis, &values, &schemes, &seeds)?;
            let p = write(out, &format!("sweep_{axis}.csv"), &sweep_to_csv(&rows))?;
            println!("sweep: {}", p.display());
        }
        Command::McsHistogram { checkpoint } => {
            let mut policy = trained_policy(&base, checkpoint.as_deref(), out)?;
            let r = experiment::evaluate(&base, policy.as_mut())?;
            let rows = mcs_histogram(&r.records, base.bler_threshold);
            let p = write(out, &format!("mcs_{}.csv", tag(&base)), &mcs_to_csv(&rows))?;
            println!("mcs histogram: {}", p.display());
        }
    }
    Ok(())
}
