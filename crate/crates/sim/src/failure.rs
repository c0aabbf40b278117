//! Scheduled failure, partition and speed-profile events.

use fedplace_core::topology::{DomainId, Topology, WorkerId};
use fedplace_core::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FailureKind {
    WorkerKill,
    BrokerKill,
    PartitionStart,
    PartitionEnd,
    HeterogeneityProfile,
}

impl FailureKind {
    pub fn name(self) -> &'static str {
        match self {
            FailureKind::WorkerKill => "worker-kill",
            FailureKind::BrokerKill => "broker-kill",
            FailureKind::PartitionStart => "partition-start",
            FailureKind::PartitionEnd => "partition-end",
            FailureKind::HeterogeneityProfile => "heterogeneity-profile",
        }
    }

    pub fn parse(s: &str) -> Result<FailureKind> {
        [
            FailureKind::WorkerKill,
            FailureKind::BrokerKill,
            FailureKind::PartitionStart,
            FailureKind::PartitionEnd,
            FailureKind::HeterogeneityProfile,
        ]
        .into_iter()
        .find(|k| k.name() == s)
        .ok_or_else(|| Error::Config(format!("unknown failure kind '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum FailureTarget {
    /// Partitions split the edge site from the cloud site; profiles apply everywhere.
    None,
    Domain(DomainId),
    Workers(Vec<WorkerId>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct FailureEvent {
    pub at_s: f64,
    pub kind: FailureKind,
    pub target: FailureTarget,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FailurePlan {
    pub events: Vec<FailureEvent>,
}

impl FailurePlan {
    pub fn broker_kill(domain: DomainId, at_s: f64) -> FailurePlan {
        FailurePlan {
            events: vec![FailureEvent { at_s, kind: FailureKind::BrokerKill, target: FailureTarget::Domain(domain) }],
        }
    }

    /// All workers of `domain` die at `at_s`.
    pub fn domain_worker_kill(domain: DomainId, at_s: f64) -> FailurePlan {
        FailurePlan {
            events: vec![FailureEvent { at_s, kind: FailureKind::WorkerKill, target: FailureTarget::Domain(domain) }],
        }
    }

    pub fn partition(at_s: f64, length_s: f64) -> FailurePlan {
        FailurePlan {
            events: vec![
                FailureEvent { at_s, kind: FailureKind::PartitionStart, target: FailureTarget::None },
                FailureEvent { at_s: at_s + length_s, kind: FailureKind::PartitionEnd, target: FailureTarget::None },
            ],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Partition intervals in seconds, an unmatched start running to infinity.
    pub fn partition_windows(&self) -> Vec<(f64, f64)> {
        let mut sorted: Vec<&FailureEvent> = self.events.iter().collect();
        sorted.sort_by(|a, b| a.at_s.total_cmp(&b.at_s));
        let mut out = Vec::new();
        let mut open: Option<f64> = None;
        for e in sorted {
            match e.kind {
                FailureKind::PartitionStart if open.is_none() => open = Some(e.at_s),
                FailureKind::PartitionEnd => {
                    if let Some(s) = open.take() {
                        out.push((s, e.at_s));
                    }
                }
                _ => {}
            }
        }
        if let Some(s) = open {
            out.push((s, f64::INFINITY));
        }
        out
    }

    /// Short label for run metadata, e.g. "broker-kill:d2@60".
    pub fn label(&self, topo: &Topology) -> String {
        if self.events.is_empty() {
            return "none".into();
        }
        self.events
            .iter()
            .map(|e| {
                let target = match &e.target {
                    FailureTarget::None => String::new(),
                    FailureTarget::Domain(d) => format!(":{}", topo.domain_name(*d)),
                    FailureTarget::Workers(ws) => format!(":{}w", ws.len()),
                };
                format!("{}{}@{}", e.kind.name(), target, e.at_s)
            })
            .collect::<Vec<_>>()
            .join(";")
    }

    pub fn validate(&self, topo: &Topology, duration_s: f64) -> Result<()> {
        let mut sorted: Vec<&FailureEvent> = self.events.iter().collect();
        sorted.sort_by(|a, b| a.at_s.total_cmp(&b.at_s));
        let mut partitioned = false;
        for e in sorted {
            if !(e.at_s >= 0.0 && e.at_s <= duration_s) {
                return Err(Error::Config(format!("{} at {} s is outside the run", e.kind.name(), e.at_s)));
            }
            match (&e.kind, &e.target) {
                (FailureKind::WorkerKill, FailureTarget::Workers(ws)) => {
                    if let Some(w) = ws.iter().find(|w| **w >= topo.workers.len()) {
                        return Err(Error::Config(format!("worker-kill targets unknown worker {w}")));
                    }
                }
                (FailureKind::WorkerKill | FailureKind::BrokerKill, FailureTarget::Domain(d)) => {
                    if *d >= topo.num_domains() {
                        return Err(Error::Config(format!("{} targets unknown domain {d}", e.kind.name())));
                    }
                }
                (
                    FailureKind::PartitionStart | FailureKind::PartitionEnd | FailureKind::HeterogeneityProfile,
                    FailureTarget::None,
                ) => {}
                (k, t) => return Err(Error::Config(format!("{} cannot target {t:?}", k.name()))),
            }
            match e.kind {
                FailureKind::PartitionStart if partitioned => {
                    return Err(Error::Config("partition-start while already partitioned".into()))
                }
                FailureKind::PartitionStart => partitioned = true,
                FailureKind::PartitionEnd if !partitioned => {
                    return Err(Error::Config("partition-end without a preceding start".into()))
                }
                FailureKind::PartitionEnd => partitioned = false,
                _ => {}
            }
        }
        Ok(())
    }
}
