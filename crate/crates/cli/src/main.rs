use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use lfme_cli::config::parse_seed_list;
use lfme_cli::runs::RunOptions;
use lfme_cli::{CliError, ExperimentConfig};
use lfme_core::train::{MethodKind, MethodSpec};

/// Experiments with expert-guided logit regularization on multi-domain data.
#[derive(Parser)]
#[command(name = "lfme", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON experiment config; the preset is used when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value = "paper-tables")]
    preset: String,
    /// Override any config key, e.g. `--set train.steps=500` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Replace the method list (repeatable).
    #[arg(long, global = true)]
    method: Vec<MethodKind>,
    /// Set alpha_half on every method.
    #[arg(long, global = true)]
    alpha_half: Option<f64>,
    /// Seeds as `3`, `0,1,2` or `0..10`; wins over LFME_SEED.
    #[arg(long, global = true)]
    seeds: Option<String>,
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    /// Parallel run slots.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Write each seed's synthetic domains as CSV.
    Gen,
    /// Train every (method, seed, held-out domain) run.
    Train {
        /// Skip runs that already finished.
        #[arg(long)]
        resume: bool,
    },
    /// Summarize finished runs into markdown and CSV tables.
    Compare,
    /// Export histograms and traces for runs under a directory.
    Analyze {
        /// Experiment output or single run directory; the config output when absent.
        dir: Option<PathBuf>,
    },
    /// Train α-dependent methods over a grid of alpha_half values.
    Sweep {
        /// Comma-separated alpha_half values.
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<f64>>,
        #[arg(long)]
        resume: bool,
    },
}

fn resolve(c: &Common) -> anyhow::Result<ExperimentConfig> {
    let mut config = match &c.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::preset(&c.preset)?,
    };
    if let Ok(s) = std::env::var("LFME_SEED") {
        config.seeds = parse_seed_list(&s).context("LFME_SEED")?;
    }
    if !c.method.is_empty() {
        config.methods = c.method.iter().map(|&k| MethodSpec::new(k)).collect();
    }
    if let Some(a) = c.alpha_half {
        for m in &mut config.methods {
            m.alpha_half = a;
        }
    }
    if let Some(s) = &c.seeds {
        config.seeds = parse_seed_list(s)?;
    }
    if let Some(o) = &c.output {
        config.output = o.clone();
    }
    for kv in &c.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Validation(format!("--set {kv:?}: expected KEY=VALUE")))?;
        config.set(k.trim(), v.trim())?;
    }
    config.validate()?;
    Ok(config)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let config = resolve(&cli.common)?;
    let opts = |resume| RunOptions {
        jobs: cli.common.jobs,
        resume,
    };
    match cli.command {
        Command::Gen => {
            let files = lfme_cli::cmd_gen(&config)?;
            eprintln!("wrote {} files under {}", files.len(), config.output.join("data").display());
        }
        Command::Train { resume } => {
            let jobs = lfme_cli::cmd_train(&config, opts(resume))?;
            eprintln!("{} runs under {}", jobs.len(), config.output.join("runs").display());
        }
        Command::Compare => {
            let missing = lfme_cli::cmd_compare(&config)?;
            if !missing.is_empty() {
                eprintln!("{} planned runs are missing; see missing.csv", missing.len());
            }
        }
        Command::Analyze { dir } => {
            let dir = dir.unwrap_or_else(|| config.output.clone());
            for r in lfme_cli::cmd_analyze(&dir)? {
                for n in &r.notices {
                    eprintln!("{}: {n}", r.dir.display());
                }
            }
        }
        Command::Sweep { grid, resume } => {
            let missing = lfme_cli::cmd_sweep(&config, grid.as_deref(), opts(resume))?;
            if !missing.is_empty() {
                eprintln!("{} sweep runs are missing", missing.len());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<CliError>().map_or(2, CliError::exit_code);
            ExitCode::from(code)
        }
    }
}
