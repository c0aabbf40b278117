//! The seven campaign phases and their cell grids.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use fedplace_core::dag::PipelineKind;
use fedplace_core::federation::GovScenario;
use fedplace_core::stats::{knee_fit, mean, KneeFit};
use fedplace_sim::{run_sim, RunRecord, StrategyKind};

use crate::config::{FailureSpec, ScenarioConfig};
use crate::{cell_files, output, report, CliError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    AllocationGrid,
    GovernanceGrid,
    Saturation,
    FailureLoad,
    Heterogeneity,
    Federation,
    KneeCalibration,
}

pub const ALLOCATION_LAMBDAS: [f64; 3] = [2.0, 5.0, 10.0];
pub const SATURATION_LAMBDAS: [f64; 5] = [5.0, 8.0, 10.0, 15.0, 50.0];
pub const FAILURE_LOAD_LAMBDAS: [f64; 3] = [5.0, 8.0, 10.0];
pub const GOVERNANCE_LAMBDA: f64 = 5.0;
pub const HETEROGENEITY_LAMBDA: f64 = 10.0;
pub const FEDERATION_LAMBDA: f64 = 5.0;
pub const PARTITION_LENGTH_S: f64 = 120.0;
/// Knee sweep: rr-global on cqi-chain at 1, 2, ..., 50 pps.
pub const KNEE_LAMBDA_MAX: u32 = 50;
pub const KNEE_BOOTSTRAP: usize = 1000;
pub const KNEE_BOOTSTRAP_SEED: u64 = 7;

impl Phase {
    pub const ALL: [Phase; 7] = [
        Phase::AllocationGrid,
        Phase::GovernanceGrid,
        Phase::Saturation,
        Phase::FailureLoad,
        Phase::Heterogeneity,
        Phase::Federation,
        Phase::KneeCalibration,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Phase::AllocationGrid => "allocation-grid",
            Phase::GovernanceGrid => "governance-grid",
            Phase::Saturation => "saturation",
            Phase::FailureLoad => "failure-load",
            Phase::Heterogeneity => "heterogeneity",
            Phase::Federation => "federation",
            Phase::KneeCalibration => "knee-calibration",
        }
    }

    pub fn parse(s: &str) -> Result<Phase, CliError> {
        Phase::ALL.into_iter().find(|p| p.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Phase::ALL.iter().map(|p| p.name()).collect();
            CliError::Config(format!("unknown phase '{s}' (one of {})", names.join(", ")))
        })
    }
}

/// One scenario of a phase; `group` names the output subdirectory.
#[derive(Clone, Debug)]
pub struct Cell {
    pub group: String,
    pub cfg: ScenarioConfig,
}

impl Cell {
    pub fn label(&self) -> String {
        format!("{}/{}/{}/{}", self.group, self.cfg.strategy, self.cfg.pipeline_name(), self.cfg.lambda)
    }
}

/// Copies the base scenario (windows, seeds, overrides) with no governance,
/// failures or speed profile.
fn cell(base: &ScenarioConfig, group: &str, strategy: StrategyKind, kind: PipelineKind, lambda: f64) -> Cell {
    let mut cfg = base.clone();
    cfg.strategy = strategy.name().into();
    cfg.pipeline = kind.name().into();
    cfg.template = None;
    cfg.lambda = lambda;
    cfg.governance = "A".into();
    cfg.failures = Vec::new();
    cfg.heterogeneity = false;
    Cell { group: group.into(), cfg }
}

/// Failure events fire an eighth of the way into the measurement window.
pub fn event_time(base: &ScenarioConfig) -> f64 {
    base.warmup_s + base.window_s / 8.0
}

pub fn federation_scenarios(base: &ScenarioConfig) -> Vec<(&'static str, Vec<FailureSpec>)> {
    let at_s = event_time(base);
    let spec = |kind: &str, domain: Option<&str>, length_s: Option<f64>| FailureSpec {
        at_s,
        kind: kind.into(),
        domain: domain.map(Into::into),
        workers: None,
        length_s,
    };
    vec![
        ("broker-kill", vec![spec("broker-kill", Some("d2"), None)]),
        ("partition", vec![spec("partition-start", None, Some(PARTITION_LENGTH_S))]),
        ("worker-kill", vec![spec("worker-kill", Some("d1"), None)]),
    ]
}

pub fn knee_cells(base: &ScenarioConfig) -> Vec<Cell> {
    (1..=KNEE_LAMBDA_MAX)
        .map(|l| cell(base, "knee", StrategyKind::RrGlobal, PipelineKind::CqiChain, l as f64))
        .collect()
}

pub fn phase_cells(phase: Phase, base: &ScenarioConfig) -> Vec<Cell> {
    let mut out = Vec::new();
    match phase {
        Phase::AllocationGrid => {
            for s in StrategyKind::ALL {
                for k in PipelineKind::ALL {
                    for l in ALLOCATION_LAMBDAS {
                        out.push(cell(base, "grid", s, k, l));
                    }
                }
            }
        }
        Phase::GovernanceGrid => {
            for g in GovScenario::ALL {
                for k in PipelineKind::ALL {
                    let mut c = cell(base, &format!("gov-{}", g.label()), StrategyKind::Market, k, GOVERNANCE_LAMBDA);
                    c.cfg.governance = g.label().into();
                    out.push(c);
                }
            }
        }
        Phase::Saturation => {
            for s in [StrategyKind::Market, StrategyKind::RrGlobal] {
                for k in PipelineKind::ALL {
                    for l in SATURATION_LAMBDAS {
                        out.push(cell(base, "saturation", s, k, l));
                    }
                }
            }
        }
        Phase::FailureLoad => {
            let kill = federation_scenarios(base).remove(2).1;
            for k in PipelineKind::ALL {
                for l in FAILURE_LOAD_LAMBDAS {
                    let mut c = cell(base, "kill-12-workers", StrategyKind::Market, k, l);
                    c.cfg.failures = kill.clone();
                    out.push(c);
                }
            }
        }
        Phase::Heterogeneity => {
            for s in StrategyKind::ALL {
                for k in PipelineKind::ALL {
                    let mut c = cell(base, "heterogeneity", s, k, HETEROGENEITY_LAMBDA);
                    c.cfg.heterogeneity = true;
                    out.push(c);
                }
            }
        }
        Phase::Federation => {
            for (name, failures) in federation_scenarios(base) {
                for k in PipelineKind::ALL {
                    let mut c = cell(base, name, StrategyKind::Market, k, FEDERATION_LAMBDA);
                    c.cfg.failures = failures.clone();
                    out.push(c);
                }
            }
        }
        Phase::KneeCalibration => out = knee_cells(base),
    }
    out
}

pub struct CellRun {
    pub cell: Cell,
    pub records: Vec<RunRecord>,
}

/// Runs every (cell, seed) pair on the current rayon pool.
pub fn run_cells(cells: &[Cell]) -> Result<Vec<CellRun>, CliError> {
    for c in cells {
        c.cfg.validate()?;
    }
    let jobs: Vec<(usize, u64)> =
        cells.iter().enumerate().flat_map(|(i, c)| c.cfg.seeds.iter().map(move |&s| (i, s))).collect();
    let done: Vec<(usize, RunRecord)> = jobs
        .par_iter()
        .map(|&(i, seed)| Ok((i, run_sim(&cells[i].cfg.sim_config(seed)?)?)))
        .collect::<Result<_, CliError>>()?;
    let mut runs: Vec<CellRun> = cells.iter().map(|c| CellRun { cell: c.clone(), records: Vec::new() }).collect();
    for (i, rec) in done {
        runs[i].records.push(rec);
    }
    Ok(runs)
}

impl CellRun {
    pub fn mean_cr(&self) -> f64 {
        let crs: Vec<f64> = self.records.iter().map(|r| r.completion_rate()).collect();
        mean(&crs).unwrap_or(0.0)
    }

    /// Mean over seeds of each seed's mean latency.
    pub fn mean_latency(&self) -> Option<f64> {
        let ms: Vec<f64> = self.records.iter().filter_map(|r| r.mean_latency()).collect();
        (ms.len() == self.records.len()).then(|| mean(&ms)).flatten()
    }
}

/// Knee of the mean rr-global completion rate over the sweep.
pub fn fit_knee(runs: &[CellRun]) -> Result<(Vec<(f64, f64)>, KneeFit), CliError> {
    let points: Vec<(f64, f64)> = runs.iter().map(|r| (r.cell.cfg.lambda, r.mean_cr())).collect();
    let fit = knee_fit(&points, KNEE_BOOTSTRAP, KNEE_BOOTSTRAP_SEED)?;
    Ok((points, fit))
}

pub fn estimate_knee(base: &ScenarioConfig) -> Result<KneeFit, CliError> {
    Ok(fit_knee(&run_cells(&knee_cells(base))?)?.1)
}

pub struct PhaseOutcome {
    pub runs: Vec<CellRun>,
    pub paths: Vec<PathBuf>,
    pub report: String,
}

/// Runs a phase, writes one directory per group under `out/<phase>/`, and
/// renders the phase report. Existing files are refused before anything runs.
pub fn run_phase(
    phase: Phase,
    base: &ScenarioConfig,
    out: &Path,
    force: bool,
    filter: Option<&str>,
) -> Result<PhaseOutcome, CliError> {
    let cells: Vec<Cell> =
        phase_cells(phase, base).into_iter().filter(|c| filter.is_none_or(|f| c.label().contains(f))).collect();
    if cells.is_empty() {
        return Err(CliError::Config(format!("filter leaves no cells in phase {}", phase.name())));
    }
    let root = out.join(phase.name());
    if !force {
        for c in &cells {
            let dir = root.join(&c.group);
            let (s, p, l) = (c.cfg.strategy.as_str(), c.cfg.pipeline_name(), c.cfg.lambda);
            let mut names: Vec<String> =
                c.cfg.seeds.iter().map(|&seed| output::row_file_name(s, &p, l, seed)).collect();
            names.push(output::summary_file_name(s, &p, l));
            if let Some(path) = names.iter().map(|n| dir.join(n)).find(|p| p.exists()) {
                return Err(CliError::Exists(path));
            }
        }
    }
    let runs = run_cells(&cells)?;
    let mut paths = Vec::new();
    let mut summaries = Vec::new();
    for r in &runs {
        let files = cell_files(&r.cell.cfg, &r.records)?;
        paths.extend(output::write_all(&root.join(&r.cell.group), &files, force)?);
        summaries.extend(output::summarize_cell(&r.records)?);
    }
    let report = phase_report(phase, &runs, &summaries)?;
    Ok(PhaseOutcome { runs, paths, report })
}

fn phase_report(phase: Phase, runs: &[CellRun], summaries: &[output::SummaryOut]) -> Result<String, CliError> {
    let mut s = format!("phase {}: {} cells, {} runs\n", phase.name(), runs.len(), summaries.len() - runs.len());
    match phase {
        Phase::KneeCalibration => {
            let (points, fit) = fit_knee(runs)?;
            for (l, cr) in &points {
                let _ = writeln!(s, "  lambda {l:>4}  rr-global CR {cr:.4}");
            }
            let ci = fit.ci.map_or("n/a".into(), |(a, b)| format!("[{a:.2}, {b:.2}]"));
            let _ = writeln!(
                s,
                "knee {:.2} pps, 95% CI {ci}{}",
                fit.breakpoint,
                if fit.degenerate { " (degenerate)" } else { "" }
            );
        }
        Phase::GovernanceGrid => {
            for k in PipelineKind::ALL {
                let base = find(runs, "gov-A", k.name()).and_then(CellRun::mean_latency);
                for g in GovScenario::ALL {
                    let m = find(runs, &format!("gov-{}", g.label()), k.name()).and_then(CellRun::mean_latency);
                    if let (Some(a), Some(m)) = (base, m) {
                        let _ = writeln!(s, "  {k} {}: mean {m:.2} ms, {:+.3}% vs A", g.label(), (m / a - 1.0) * 100.0);
                    }
                }
            }
        }
        Phase::Federation | Phase::FailureLoad => {
            for r in runs {
                let xs: usize = r.records.iter().map(|x| x.stats.cross_site_completions_in_partition).sum();
                let _ = writeln!(
                    s,
                    "  {}: CR {:.4}, cross-site completions in partition {xs}",
                    r.cell.label(),
                    r.mean_cr()
                );
            }
        }
        _ => {}
    }
    s.push_str(&report::render(summaries));
    Ok(s)
}

fn find<'a>(runs: &'a [CellRun], group: &str, pipeline: &str) -> Option<&'a CellRun> {
    runs.iter().find(|r| r.cell.group == group && r.cell.cfg.pipeline_name() == pipeline)
}
