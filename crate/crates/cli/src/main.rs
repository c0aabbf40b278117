use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fedplace_cli::phases::{self, Phase};
use fedplace_cli::{accept_exit_code, acceptance, parse_seeds, report, run_cell, CliError, ScenarioConfig, EXIT_ERROR};

#[derive(Parser)]
#[command(name = "fedplace", version, about = "Federated pipeline placement simulator")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Args)]
struct Common {
    /// Scenario file (TOML); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; overrides the config's out_dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seeds, e.g. "1-5" or "1,3,7"; overrides the config.
    #[arg(long)]
    seeds: Option<String>,
    /// Worker threads for independent runs (default: all cores).
    #[arg(long)]
    parallel: Option<usize>,
    /// Overwrite existing output files.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Verb {
    /// Run one scenario for every seed and write its CSVs.
    RunCell(Common),
    /// Run a campaign phase and print its report.
    RunPhase {
        phase: String,
        #[command(flatten)]
        common: Common,
        /// Only cells whose label contains this text.
        #[arg(long)]
        filter: Option<String>,
    },
    /// Estimate the saturation knee from the rr-global sweep.
    Knee(Common),
    /// Run the acceptance criteria.
    Accept {
        /// Group names or ids, comma separated (e.g. "structure,10").
        #[arg(long)]
        filter: Option<String>,
        #[arg(long)]
        parallel: Option<usize>,
    },
    /// Summarise every summary CSV under a directory.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
}

fn pool(threads: Option<usize>) -> Result<(), CliError> {
    if let Some(n) = threads {
        if n == 0 {
            return Err(CliError::Config("--parallel must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| CliError::Run(e.to_string()))?;
    }
    Ok(())
}

fn scenario(c: &Common) -> Result<ScenarioConfig, CliError> {
    let mut cfg = match &c.config {
        Some(p) => ScenarioConfig::load(p)?,
        None => ScenarioConfig::default(),
    };
    if let Some(s) = &c.seeds {
        cfg.seeds = parse_seeds(s)?;
    }
    if let Some(o) = &c.out {
        cfg.out_dir = o.clone();
    }
    cfg.validate()?;
    pool(c.parallel)?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<i32, CliError> {
    match cli.verb {
        Verb::RunCell(c) => {
            let cfg = scenario(&c)?;
            let outcome = run_cell(&cfg, &cfg.out_dir, c.force)?;
            for p in &outcome.paths {
                println!("wrote {}", p.display());
            }
            print!("{}", report::render(&outcome.summary));
        }
        Verb::RunPhase { phase, common, filter } => {
            let phase = Phase::parse(&phase)?;
            let cfg = scenario(&common)?;
            let outcome = phases::run_phase(phase, &cfg, &cfg.out_dir, common.force, filter.as_deref())?;
            println!("wrote {} files under {}", outcome.paths.len(), cfg.out_dir.join(phase.name()).display());
            print!("{}", outcome.report);
        }
        Verb::Knee(c) => {
            let cfg = scenario(&c)?;
            let outcome = phases::run_phase(Phase::KneeCalibration, &cfg, &cfg.out_dir, c.force, None)?;
            print!("{}", outcome.report);
        }
        Verb::Accept { filter, parallel } => {
            pool(parallel)?;
            let results = acceptance::run(filter.as_deref(), |r| println!("{}", r.line()))?;
            let failed = results.iter().filter(|r| !r.passed).count();
            println!("acceptance: {} of {} criteria passed", results.len() - failed, results.len());
            return Ok(accept_exit_code(failed));
        }
        Verb::Report { out } => print!("{}", report::report_dir(&out)?),
    }
    Ok(0)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_ERROR as u8)
        }
    }
}
