//! Paired market-versus-baseline reports over summary lines.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use fedplace_core::stats::compare;

use crate::output::{read_summary, SummaryOut};
use crate::CliError;

const REPORT_BOOTSTRAP: usize = 1000;
const REPORT_SEED: u64 = 1;

fn scenario_key(s: &SummaryOut) -> String {
    let mut k = format!("governance {}", s.governance);
    if s.failures != "none" {
        k += &format!(", failures {}", s.failures);
    }
    if s.heterogeneity {
        k += ", heterogeneous";
    }
    k
}

/// Pooled CR and latency per cell, then win/loss/tie counts of the market
/// against every other strategy, pairing cells by (pipeline, lambda, seed).
pub fn render(summaries: &[SummaryOut]) -> String {
    let mut out = String::new();
    let mut by_scenario: BTreeMap<String, Vec<&SummaryOut>> = BTreeMap::new();
    for s in summaries {
        by_scenario.entry(scenario_key(s)).or_default().push(s);
    }
    for (scenario, lines) in by_scenario {
        let _ = writeln!(out, "[{scenario}]");
        for s in lines.iter().filter(|s| s.seed == "pooled") {
            let mean = s.mean_latency_ms.map_or("n/a".into(), |m| format!("{m:.2} ms"));
            let _ = writeln!(
                out,
                "  {:<15} {:<14} lambda {:<5} CR {:.4}  mean {mean}",
                s.strategy, s.pipeline_kind, s.lambda, s.completion_rate
            );
        }
        type CellKey = (String, String, String);
        let key = |s: &SummaryOut| -> CellKey { (s.pipeline_kind.clone(), format!("{}", s.lambda), s.seed.clone()) };
        let mut per_strategy: BTreeMap<&str, BTreeMap<CellKey, f64>> = BTreeMap::new();
        for s in lines.iter().filter(|s| s.seed != "pooled") {
            if let Some(m) = s.mean_latency_ms {
                per_strategy.entry(s.strategy.as_str()).or_default().insert(key(s), m);
            }
        }
        let Some(market) = per_strategy.get("market") else { continue };
        for (baseline, cells) in per_strategy.iter().filter(|(name, _)| **name != "market") {
            let pairs: Vec<(f64, f64)> = market.iter().filter_map(|(k, &m)| cells.get(k).map(|&b| (m, b))).collect();
            if !pairs.is_empty() {
                let _ = writeln!(out, "  {}", compare(baseline, &pairs, REPORT_BOOTSTRAP, REPORT_SEED).render());
            }
        }
    }
    out
}

/// Every `*_summary.csv` under `dir`, in sorted path order.
pub fn summary_files(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut found = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        let entries = std::fs::read_dir(&d).map_err(|e| CliError::Io(format!("{}: {e}", d.display())))?;
        for entry in entries {
            let path = entry.map_err(|e| CliError::Io(e.to_string()))?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.ends_with("_summary.csv")) {
                found.push(path);
            }
        }
    }
    found.sort();
    Ok(found)
}

pub fn report_dir(dir: &Path) -> Result<String, CliError> {
    let files = summary_files(dir)?;
    if files.is_empty() {
        return Err(CliError::Io(format!("no summary files under {}", dir.display())));
    }
    let mut all = Vec::new();
    for f in &files {
        all.extend(read_summary(f)?);
    }
    Ok(render(&all))
}
