//! Run configuration for one simulated cell.

use std::fmt;

use fedplace_core::dag::{build_template, PipelineKind, PipelineTemplate};
use fedplace_core::federation::{FederationConfig, GovScenario};
use fedplace_core::market::MarketConfig;
use fedplace_core::strategies::CostWeights;
use fedplace_core::topology::{DomainId, Topology};
use fedplace_core::{Error, Result};

use crate::failure::FailurePlan;

/// Per-stage processing time of a nominal-speed worker.
pub const BASE_SERVICE_MS: f64 = 220.0;
pub const DEFAULT_WARMUP_S: f64 = 240.0;
pub const DEFAULT_WINDOW_S: f64 = 600.0;
pub const DEFAULT_DRAIN_S: f64 = 30.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum StrategyKind {
    Market,
    Oracle,
    OracleSharded,
    RrGlobal,
    Locality,
    LatencyGreedy,
    Spillover,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 7] = [
        StrategyKind::Market,
        StrategyKind::Oracle,
        StrategyKind::OracleSharded,
        StrategyKind::RrGlobal,
        StrategyKind::Locality,
        StrategyKind::LatencyGreedy,
        StrategyKind::Spillover,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::Market => "market",
            StrategyKind::Oracle => "oracle",
            StrategyKind::OracleSharded => "oracle-sharded",
            StrategyKind::RrGlobal => "rr-global",
            StrategyKind::Locality => "locality",
            StrategyKind::LatencyGreedy => "latency-greedy",
            StrategyKind::Spillover => "spillover",
        }
    }

    pub fn parse(s: &str) -> Result<StrategyKind> {
        StrategyKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy '{s}'")))
    }

    /// Decided by the coordinator after a forwarding hop from the origin broker.
    pub fn is_centralised(self) -> bool {
        matches!(self, StrategyKind::Oracle | StrategyKind::OracleSharded | StrategyKind::RrGlobal)
    }

    /// Re-places stages lost to timeouts or dead workers and withdraws
    /// queued work of abandoned pipelines. Round-robin does neither.
    pub fn replans(self) -> bool {
        self != StrategyKind::RrGlobal
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimConfig {
    pub strategy: StrategyKind,
    pub template: PipelineTemplate,
    pub lambda_pps: f64,
    /// Total simulated arrival horizon; the measurement window is [warmup, duration).
    pub duration_s: f64,
    pub warmup_s: f64,
    /// Extra time after the last arrival for in-flight pipelines to finish.
    pub drain_s: f64,
    pub seed: u64,
    pub governance: GovScenario,
    pub failures: FailurePlan,
    /// Apply the edge-slow / cloud-fast speed profile from t = 0.
    pub heterogeneity: bool,
    pub topology: Topology,
    pub market: MarketConfig,
    pub federation: FederationConfig,
    pub weights: CostWeights,
    pub base_service_ms: f64,
    pub broker_decision_ms: f64,
    /// Home of the centralised strategies.
    pub coordinator: DomainId,
    pub record_trace: bool,
}

impl SimConfig {
    /// Defaults: 240 s warmup, 600 s window, governance scenario A, no failures.
    pub fn new(strategy: StrategyKind, kind: PipelineKind, lambda_pps: f64, seed: u64) -> SimConfig {
        SimConfig {
            strategy,
            template: build_template(kind),
            lambda_pps,
            duration_s: DEFAULT_WARMUP_S + DEFAULT_WINDOW_S,
            warmup_s: DEFAULT_WARMUP_S,
            drain_s: DEFAULT_DRAIN_S,
            seed,
            governance: GovScenario::A,
            failures: FailurePlan::default(),
            heterogeneity: false,
            topology: Topology::default_federation(),
            market: MarketConfig::default(),
            federation: FederationConfig::default(),
            weights: CostWeights::default(),
            base_service_ms: BASE_SERVICE_MS,
            broker_decision_ms: 0.0,
            coordinator: 0,
            record_trace: false,
        }
    }

    /// Sets warmup and window length together.
    pub fn with_window(mut self, warmup_s: f64, window_s: f64) -> SimConfig {
        self.warmup_s = warmup_s;
        self.duration_s = warmup_s + window_s;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_pps > 0.0 && self.lambda_pps.is_finite()) {
            return Err(Error::Config(format!("lambda must be positive, got {}", self.lambda_pps)));
        }
        if !(self.warmup_s >= 0.0 && self.warmup_s < self.duration_s && self.duration_s.is_finite()) {
            return Err(Error::Config("need 0 <= warmup < duration".into()));
        }
        if !(self.drain_s >= 0.0) || !(self.base_service_ms > 0.0) || !(self.broker_decision_ms >= 0.0) {
            return Err(Error::Config("drain and decision time must be >= 0, service time > 0".into()));
        }
        if self.template.len() > 63 {
            return Err(Error::Config("pipelines are limited to 63 stages".into()));
        }
        self.template.validate()?;
        self.topology.validate()?;
        if self.coordinator >= self.topology.num_domains() {
            return Err(Error::Config(format!("coordinator domain {} does not exist", self.coordinator)));
        }
        if self.template.stages.iter().any(|s| s.home_domain >= self.topology.num_domains()) {
            return Err(Error::Config("stage home domain outside the topology".into()));
        }
        self.market.validate()?;
        self.federation.validate()?;
        self.failures.validate(&self.topology, self.duration_s)
    }
}
