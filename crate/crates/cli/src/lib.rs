//! Scenario files, campaign phases, CSV output and the acceptance suite.

pub mod acceptance;
pub mod config;
pub mod output;
pub mod phases;
pub mod report;

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;

use fedplace_sim::{run_sim, RunRecord};

pub use config::ScenarioConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{} already exists (use --force to overwrite)", .0.display())]
    Exists(PathBuf),
    #[error("io error: {0}")]
    Io(String),
    #[error("run failed: {0}")]
    Run(String),
}

impl From<fedplace_core::Error> for CliError {
    fn from(e: fedplace_core::Error) -> Self {
        match e {
            fedplace_core::Error::Config(m) => CliError::Config(m),
            other => CliError::Run(other.to_string()),
        }
    }
}

/// Process exit codes.
pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
/// Acceptance exits with 1 + failed criteria, capped here.
pub const EXIT_ACCEPT_CAP: i32 = 100;

pub fn accept_exit_code(failed: usize) -> i32 {
    if failed == 0 {
        EXIT_OK
    } else {
        (1 + failed as i32).min(EXIT_ACCEPT_CAP)
    }
}

/// Runs every seed of a scenario; records come back in seed order.
pub fn run_records(cfg: &ScenarioConfig) -> Result<Vec<RunRecord>, CliError> {
    cfg.validate()?;
    cfg.seeds.par_iter().map(|&seed| Ok(run_sim(&cfg.sim_config(seed)?)?)).collect()
}

/// Row files (one per seed) and the summary file of one scenario.
pub fn cell_files(cfg: &ScenarioConfig, records: &[RunRecord]) -> Result<Vec<(String, String)>, CliError> {
    let strategy = cfg.strategy_kind()?.name();
    let pipeline = cfg.pipeline_name();
    let mut files = Vec::with_capacity(records.len() + 1);
    for rec in records {
        files.push((output::row_file_name(strategy, &pipeline, cfg.lambda, rec.meta.seed), output::render_rows(rec)?));
    }
    let summary = output::summarize_cell(records)?;
    files.push((output::summary_file_name(strategy, &pipeline, cfg.lambda), output::render_summary(&summary)?));
    Ok(files)
}

pub struct CellOutcome {
    pub records: Vec<RunRecord>,
    pub summary: Vec<output::SummaryOut>,
    pub paths: Vec<PathBuf>,
}

/// Runs a scenario and writes its CSVs into `dir`.
pub fn run_cell(cfg: &ScenarioConfig, dir: &Path, force: bool) -> Result<CellOutcome, CliError> {
    cfg.validate()?;
    let strategy = cfg.strategy_kind()?.name();
    let pipeline = cfg.pipeline_name();
    if !force {
        let mut names: Vec<String> =
            cfg.seeds.iter().map(|&s| output::row_file_name(strategy, &pipeline, cfg.lambda, s)).collect();
        names.push(output::summary_file_name(strategy, &pipeline, cfg.lambda));
        if let Some(p) = names.iter().map(|n| dir.join(n)).find(|p| p.exists()) {
            return Err(CliError::Exists(p));
        }
    }
    let records = run_records(cfg)?;
    let files = cell_files(cfg, &records)?;
    let paths = output::write_all(dir, &files, force)?;
    let summary = output::summarize_cell(&records)?;
    Ok(CellOutcome { records, summary, paths })
}

/// Parses "1,2,5" or "1-5" (or a mix, "1-3,7").
pub fn parse_seeds(s: &str) -> Result<Vec<u64>, CliError> {
    let bad = || CliError::Config(format!("bad seed list '{s}'"));
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b): (u64, u64) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
                if a > b {
                    return Err(bad());
                }
                out.extend(a..=b);
            }
            None => out.push(part.parse().map_err(|_| bad())?),
        }
    }
    if out.is_empty() {
        return Err(bad());
    }
    Ok(out)
}
