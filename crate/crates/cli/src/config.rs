//! TOML scenario files.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use fedplace_core::dag::{build_template, PipelineKind, PipelineTemplate};
use fedplace_core::federation::GovScenario;
use fedplace_core::topology::WorkerId;
use fedplace_core::{Error, Result};
use fedplace_sim::config::{DEFAULT_DRAIN_S, DEFAULT_WARMUP_S, DEFAULT_WINDOW_S};
use fedplace_sim::{FailureEvent, FailureKind, FailurePlan, FailureTarget, SimConfig, StrategyKind};

pub const SCHEMA_VERSION: u32 = 1;

/// One scenario: a strategy, a pipeline, a rate and the seeds to run.
#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub schema_version: u32,
    #[serde(default = "default_strategy")]
    pub strategy: String,
    #[serde(default = "default_pipeline")]
    pub pipeline: String,
    /// Custom pipeline; replaces `pipeline` when present.
    #[serde(default)]
    pub template: Option<PipelineTemplate>,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_warmup")]
    pub warmup_s: f64,
    #[serde(default = "default_window")]
    pub window_s: f64,
    #[serde(default = "default_drain")]
    pub drain_s: f64,
    #[serde(default = "default_governance")]
    pub governance: String,
    #[serde(default)]
    pub heterogeneity: bool,
    #[serde(default)]
    pub failures: Vec<FailureSpec>,
    #[serde(default)]
    pub latency: LatencyOverrides,
    #[serde(default)]
    pub market: MarketOverrides,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FailureSpec {
    pub at_s: f64,
    pub kind: String,
    /// Domain name such as "d2".
    #[serde(default)]
    pub domain: Option<String>,
    #[serde(default)]
    pub workers: Option<Vec<WorkerId>>,
    /// Partition length; a partition without one lasts to the end of the run.
    #[serde(default)]
    pub length_s: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatencyOverrides {
    pub lan_ms: Option<f64>,
    pub wan_ms: Option<f64>,
    pub wan_jitter_ms: Option<f64>,
    pub urllc_delay_ms: Option<f64>,
    pub embb_delay_ms: Option<f64>,
    pub best_effort_delay_ms: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketOverrides {
    pub wan_cost: Option<f64>,
    pub utilisation_cap: Option<f64>,
    pub budget_multiplier: Option<f64>,
}

fn default_strategy() -> String {
    StrategyKind::Market.name().into()
}
fn default_pipeline() -> String {
    PipelineKind::CqiChain.name().into()
}
fn default_lambda() -> f64 {
    5.0
}
fn default_seeds() -> Vec<u64> {
    (1..=5).collect()
}
fn default_warmup() -> f64 {
    DEFAULT_WARMUP_S
}
fn default_window() -> f64 {
    DEFAULT_WINDOW_S
}
fn default_drain() -> f64 {
    DEFAULT_DRAIN_S
}
fn default_governance() -> String {
    "A".into()
}
fn default_out() -> PathBuf {
    PathBuf::from("out")
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            schema_version: SCHEMA_VERSION,
            strategy: default_strategy(),
            pipeline: default_pipeline(),
            template: None,
            lambda: default_lambda(),
            seeds: default_seeds(),
            warmup_s: default_warmup(),
            window_s: default_window(),
            drain_s: default_drain(),
            governance: default_governance(),
            heterogeneity: false,
            failures: Vec::new(),
            latency: LatencyOverrides::default(),
            market: MarketOverrides::default(),
            out_dir: default_out(),
        }
    }
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<ScenarioConfig> {
        let cfg: ScenarioConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<ScenarioConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        ScenarioConfig::from_toml(&text)
    }

    /// Checks everything a run would reject, for every seed.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        let mut seen = self.seeds.clone();
        seen.sort_unstable();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("seeds must be distinct".into()));
        }
        self.sim_config(self.seeds[0])?.validate()
    }

    pub fn strategy_kind(&self) -> Result<StrategyKind> {
        StrategyKind::parse(&self.strategy)
    }

    /// Name used in file names and CSV rows.
    pub fn pipeline_name(&self) -> String {
        match &self.template {
            Some(t) => t.name.clone(),
            None => self.pipeline.clone(),
        }
    }

    fn template(&self) -> Result<PipelineTemplate> {
        match &self.template {
            Some(t) => Ok(t.clone()),
            None => Ok(build_template(PipelineKind::parse(&self.pipeline)?)),
        }
    }

    pub fn sim_config(&self, seed: u64) -> Result<SimConfig> {
        let strategy = self.strategy_kind()?;
        let mut cfg = SimConfig::new(strategy, PipelineKind::CqiChain, self.lambda, seed)
            .with_window(self.warmup_s, self.window_s);
        cfg.template = self.template()?;
        cfg.drain_s = self.drain_s;
        cfg.governance = GovScenario::parse(&self.governance)?;
        cfg.heterogeneity = self.heterogeneity;
        let lat = &mut cfg.topology.latency;
        let o = &self.latency;
        for (slot, v) in [
            (&mut lat.lan_ms, o.lan_ms),
            (&mut lat.wan_ms, o.wan_ms),
            (&mut lat.wan_jitter_ms, o.wan_jitter_ms),
            (&mut lat.urllc_delay_ms, o.urllc_delay_ms),
            (&mut lat.embb_delay_ms, o.embb_delay_ms),
            (&mut lat.best_effort_delay_ms, o.best_effort_delay_ms),
        ] {
            if let Some(v) = v {
                *slot = v;
            }
        }
        let m = &self.market;
        if let Some(v) = m.wan_cost {
            cfg.market.wan_cost = v;
        }
        if let Some(v) = m.utilisation_cap {
            cfg.market.utilisation_cap = v;
        }
        if let Some(v) = m.budget_multiplier {
            cfg.market.budget_multiplier = v;
        }
        cfg.failures = self.failure_plan(&cfg)?;
        Ok(cfg)
    }

    fn failure_plan(&self, cfg: &SimConfig) -> Result<FailurePlan> {
        let mut plan = FailurePlan::default();
        for f in &self.failures {
            let kind = FailureKind::parse(&f.kind)?;
            let target = match (&f.domain, &f.workers) {
                (Some(_), Some(_)) => {
                    return Err(Error::Config(format!("{}: give a domain or workers, not both", f.kind)))
                }
                (Some(name), None) => FailureTarget::Domain(
                    cfg.topology
                        .domain_by_name(name)
                        .ok_or_else(|| Error::Config(format!("unknown domain '{name}'")))?,
                ),
                (None, Some(ws)) => FailureTarget::Workers(ws.clone()),
                (None, None) => FailureTarget::None,
            };
            if f.length_s.is_some() && kind != FailureKind::PartitionStart {
                return Err(Error::Config(format!("length_s only applies to partition-start, not {}", f.kind)));
            }
            plan.events.push(FailureEvent { at_s: f.at_s, kind, target });
            if let Some(len) = f.length_s {
                if len.is_nan() || len <= 0.0 {
                    return Err(Error::Config("partition length must be positive".into()));
                }
                plan.events.push(FailureEvent {
                    at_s: f.at_s + len,
                    kind: FailureKind::PartitionEnd,
                    target: FailureTarget::None,
                });
            }
        }
        Ok(plan)
    }
}
