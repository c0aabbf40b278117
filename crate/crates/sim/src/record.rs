//! Per-pipeline outcome rows and run metadata.

use serde::Serialize;

use fedplace_core::stats::{summarize, CellSummary};
use fedplace_core::Result;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PipelineRow {
    pub pipeline_id: u64,
    pub arrival_time_ms: f64,
    pub origin: String,
    pub strategy: String,
    pub accepted: bool,
    pub completed: bool,
    pub end_to_end_latency_ms: Option<f64>,
    pub domains_crossed: usize,
    pub placement_cost: Option<f64>,
    pub reject_reason: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunMeta {
    pub strategy: String,
    pub pipeline_kind: String,
    pub lambda: f64,
    pub seed: u64,
    pub scenario: String,
    pub failures: String,
    pub heterogeneity: bool,
}

/// Whole-run counters, over every arrival rather than the window only.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct RunStats {
    pub arrived: usize,
    pub accepted: usize,
    pub completed: usize,
    pub failed: usize,
    pub rejected: usize,
    pub in_flight_at_end: usize,
    /// Stage inputs delivered across sites while a partition was scheduled.
    pub cross_site_deliveries_in_partition: usize,
    /// Completed stages with an input delivered across sites during a partition.
    pub cross_site_completions_in_partition: usize,
    pub dropped_messages: usize,
    pub replacements: usize,
    pub deferrals: usize,
    pub events: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub meta: RunMeta,
    pub rows: Vec<PipelineRow>,
    pub stats: RunStats,
    /// Event trace, filled only when tracing is enabled.
    pub trace: Vec<String>,
}

impl RunRecord {
    pub fn latencies(&self) -> Vec<f64> {
        self.rows.iter().filter_map(|r| r.end_to_end_latency_ms).collect()
    }

    pub fn completion_rate(&self) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        self.rows.iter().filter(|r| r.completed).count() as f64 / self.rows.len() as f64
    }

    pub fn mean_latency(&self) -> Option<f64> {
        fedplace_core::stats::mean(&self.latencies())
    }

    pub fn summary(&self) -> Result<CellSummary> {
        summarize(
            &self.meta.strategy,
            &self.meta.pipeline_kind,
            self.meta.lambda,
            self.meta.seed,
            self.rows.len(),
            &self.latencies(),
        )
    }
}
