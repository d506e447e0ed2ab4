//! Experiment runner behind the `lfme` binary: configs, run directories,
//! summary tables and analysis exports.

pub mod analyze;
pub mod config;
pub mod error;
pub mod runs;
pub mod tables;

use std::path::Path;

use lfme_core::analysis::DEFAULT_ALPHA_GRID;
use lfme_core::domains::write_domain_csv;

pub use config::ExperimentConfig;
pub use error::{CliError, Result};
use runs::{plan, run_all, Job, RunOptions};

/// Writes every domain of each seed's suite to `<output>/data/seed-<s>/domain_<id>.csv`.
pub fn cmd_gen(config: &ExperimentConfig) -> Result<Vec<std::path::PathBuf>> {
    if !matches!(config.suite, config::SuiteSource::Synthetic(_)) {
        return Err(CliError::Validation("gen needs a synthetic suite".into()));
    }
    let mut written = Vec::new();
    for &seed in &config.seeds {
        let suite = config.load_suite(seed)?;
        let dir = config.output.join("data").join(format!("seed-{seed}"));
        std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        for ds in &suite.domains {
            let path = dir.join(format!("domain_{}.csv", ds.domain_id));
            let tmp = path.with_extension("csv.tmp");
            write_domain_csv(ds, &tmp)?;
            std::fs::rename(&tmp, &path).map_err(|e| CliError::io(&path, e))?;
            written.push(path);
        }
    }
    Ok(written)
}

pub fn cmd_train(config: &ExperimentConfig, opts: RunOptions) -> Result<Vec<Job>> {
    let jobs = plan(config)?;
    run_all(config, &jobs, opts)?;
    Ok(jobs)
}

/// Writes `summary.{md,csv}` and `missing.csv`; returns the missing runs.
pub fn cmd_compare(config: &ExperimentConfig) -> Result<Vec<Job>> {
    let jobs = plan(config)?;
    let (tables, missing) = tables::summary_tables(config, &jobs)?;
    tables::write_summary(config, "summary", &tables, &missing)?;
    Ok(missing)
}

pub fn cmd_analyze(dir: &Path) -> Result<Vec<analyze::RunAnalysis>> {
    analyze::analyze(dir)
}

/// Expands every α-dependent method over `grid`, trains, and writes `sweep.{md,csv}`.
pub fn cmd_sweep(config: &ExperimentConfig, grid: Option<&[f64]>, opts: RunOptions) -> Result<Vec<Job>> {
    let grid = grid.unwrap_or(&DEFAULT_ALPHA_GRID);
    let swept = sweep_config(config, grid)?;
    let jobs = plan(&swept)?;
    run_all(&swept, &jobs, opts)?;
    let (tables, missing) = tables::summary_tables(&swept, &jobs)?;
    tables::write_summary(&swept, "sweep", &tables, &missing)?;
    Ok(missing)
}

/// The config whose methods are the α-dependent methods of `config` at each grid value.
pub fn sweep_config(config: &ExperimentConfig, grid: &[f64]) -> Result<ExperimentConfig> {
    if grid.is_empty() {
        return Err(CliError::Validation("--grid: empty".into()));
    }
    let mut out = config.clone();
    out.methods = config
        .methods
        .iter()
        .filter(|m| m.kind.uses_alpha())
        .flat_map(|m| grid.iter().map(move |&a| m.clone().with_alpha_half(a)))
        .collect();
    if out.methods.is_empty() {
        return Err(CliError::Validation("methods: none depends on alpha_half".into()));
    }
    out.validate()?;
    Ok(out)
}
