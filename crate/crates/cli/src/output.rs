//! Versioned CSV files for run records and cell summaries.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use fedplace_core::stats::summarize;
use fedplace_sim::RunRecord;

use crate::CliError;

pub const ROW_SCHEMA: &str = "#schema:runrecord-v1";
pub const SUMMARY_SCHEMA: &str = "#schema:cellsummary-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RowOut {
    pub pipeline_id: u64,
    pub arrival_time_ms: f64,
    pub origin: String,
    pub strategy: String,
    pub pipeline_kind: String,
    pub lambda: f64,
    pub seed: u64,
    pub governance: String,
    pub failures: String,
    pub heterogeneity: bool,
    pub accepted: bool,
    pub completed: bool,
    pub end_to_end_latency_ms: Option<f64>,
    pub domains_crossed: usize,
    pub placement_cost: Option<f64>,
    pub reject_reason: Option<String>,
}

/// One line of a summary file; `seed` is "pooled" for the all-seeds line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryOut {
    pub strategy: String,
    pub pipeline_kind: String,
    pub lambda: f64,
    pub seed: String,
    pub governance: String,
    pub failures: String,
    pub heterogeneity: bool,
    pub n_events: usize,
    pub completed: usize,
    pub completion_rate: f64,
    pub mean_latency_ms: Option<f64>,
    pub p50_ms: Option<f64>,
    pub p95_ms: Option<f64>,
    pub p99_ms: Option<f64>,
}

pub fn lambda_label(lambda: f64) -> String {
    format!("{lambda}")
}

pub fn row_file_name(strategy: &str, pipeline: &str, lambda: f64, seed: u64) -> String {
    format!("{strategy}_{pipeline}_{}_{seed}.csv", lambda_label(lambda))
}

pub fn summary_file_name(strategy: &str, pipeline: &str, lambda: f64) -> String {
    format!("{strategy}_{pipeline}_{}_summary.csv", lambda_label(lambda))
}

fn to_csv<T: Serialize>(schema: &str, records: &[T]) -> Result<String, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in records {
        w.serialize(r).map_err(|e| CliError::Io(e.to_string()))?;
    }
    let body = w.into_inner().map_err(|e| CliError::Io(e.to_string()))?;
    let body = String::from_utf8(body).map_err(|e| CliError::Io(e.to_string()))?;
    Ok(format!("{schema}\n{body}"))
}

pub fn render_rows(rec: &RunRecord) -> Result<String, CliError> {
    let m = &rec.meta;
    let rows: Vec<RowOut> = rec
        .rows
        .iter()
        .map(|r| RowOut {
            pipeline_id: r.pipeline_id,
            arrival_time_ms: r.arrival_time_ms,
            origin: r.origin.clone(),
            strategy: r.strategy.clone(),
            pipeline_kind: m.pipeline_kind.clone(),
            lambda: m.lambda,
            seed: m.seed,
            governance: m.scenario.clone(),
            failures: m.failures.clone(),
            heterogeneity: m.heterogeneity,
            accepted: r.accepted,
            completed: r.completed,
            end_to_end_latency_ms: r.end_to_end_latency_ms,
            domains_crossed: r.domains_crossed,
            placement_cost: r.placement_cost,
            reject_reason: r.reject_reason.clone(),
        })
        .collect();
    if rows.is_empty() {
        // The header still has to be there for an empty window.
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(ROW_COLUMNS).map_err(|e| CliError::Io(e.to_string()))?;
        let body = String::from_utf8(w.into_inner().map_err(|e| CliError::Io(e.to_string()))?)
            .map_err(|e| CliError::Io(e.to_string()))?;
        return Ok(format!("{ROW_SCHEMA}\n{body}"));
    }
    to_csv(ROW_SCHEMA, &rows)
}

pub const ROW_COLUMNS: [&str; 16] = [
    "pipeline_id",
    "arrival_time_ms",
    "origin",
    "strategy",
    "pipeline_kind",
    "lambda",
    "seed",
    "governance",
    "failures",
    "heterogeneity",
    "accepted",
    "completed",
    "end_to_end_latency_ms",
    "domains_crossed",
    "placement_cost",
    "reject_reason",
];

fn summary_line(rec: &RunRecord, seed: String, arrived: usize, latencies: &[f64]) -> Result<SummaryOut, CliError> {
    let m = &rec.meta;
    let s = summarize(&m.strategy, &m.pipeline_kind, m.lambda, m.seed, arrived, latencies)
        .map_err(|e| CliError::Run(e.to_string()))?;
    Ok(SummaryOut {
        strategy: s.strategy,
        pipeline_kind: s.pipeline_kind,
        lambda: s.lambda,
        seed,
        governance: m.scenario.clone(),
        failures: m.failures.clone(),
        heterogeneity: m.heterogeneity,
        n_events: s.n_events,
        completed: s.completed,
        completion_rate: s.completion_rate,
        mean_latency_ms: s.mean_latency_ms,
        p50_ms: s.p50_ms,
        p95_ms: s.p95_ms,
        p99_ms: s.p99_ms,
    })
}

/// Per-seed lines followed by one pooled line over all rows.
pub fn summarize_cell(records: &[RunRecord]) -> Result<Vec<SummaryOut>, CliError> {
    let mut out = Vec::with_capacity(records.len() + 1);
    for rec in records {
        out.push(summary_line(rec, rec.meta.seed.to_string(), rec.rows.len(), &rec.latencies())?);
    }
    if let Some(first) = records.first() {
        let arrived = records.iter().map(|r| r.rows.len()).sum();
        let lat: Vec<f64> = records.iter().flat_map(|r| r.latencies()).collect();
        out.push(summary_line(first, "pooled".into(), arrived, &lat)?);
    }
    Ok(out)
}

pub fn render_summary(lines: &[SummaryOut]) -> Result<String, CliError> {
    to_csv(SUMMARY_SCHEMA, lines)
}

/// Writes every file or none: existing targets are refused up front unless
/// `force`, and each file goes through a temporary name and a rename.
pub fn write_all(dir: &Path, files: &[(String, String)], force: bool) -> Result<Vec<PathBuf>, CliError> {
    let paths: Vec<PathBuf> = files.iter().map(|(name, _)| dir.join(name)).collect();
    if !force {
        if let Some(p) = paths.iter().find(|p| p.exists()) {
            return Err(CliError::Exists(p.clone()));
        }
    }
    fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    let mut staged = Vec::with_capacity(files.len());
    for ((name, body), path) in files.iter().zip(&paths) {
        let tmp = dir.join(format!(".{name}.tmp"));
        if let Err(e) = fs::write(&tmp, body) {
            for t in staged.iter().chain(std::iter::once(&tmp)) {
                let _ = fs::remove_file(t);
            }
            return Err(CliError::Io(format!("{}: {e}", path.display())));
        }
        staged.push(tmp);
    }
    for (tmp, path) in staged.iter().zip(&paths) {
        fs::rename(tmp, path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    }
    Ok(paths)
}

/// Reads a summary file, checking its schema line.
pub fn read_summary(path: &Path) -> Result<Vec<SummaryOut>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let (first, body) = text.split_once('\n').unwrap_or((&text, ""));
    if first != SUMMARY_SCHEMA {
        return Err(CliError::Io(format!("{}: expected '{SUMMARY_SCHEMA}' header", path.display())));
    }
    let mut r = csv::Reader::from_reader(body.as_bytes());
    r.deserialize()
        .collect::<Result<Vec<SummaryOut>, _>>()
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

/// Reads a row file, checking its schema line.
pub fn read_rows(path: &Path) -> Result<Vec<RowOut>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let (first, body) = text.split_once('\n').unwrap_or((&text, ""));
    if first != ROW_SCHEMA {
        return Err(CliError::Io(format!("{}: expected '{ROW_SCHEMA}' header", path.display())));
    }
    let mut r = csv::Reader::from_reader(body.as_bytes());
    r.deserialize().collect::<Result<Vec<RowOut>, _>>().map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}
