//! Domains, sites, slices, workers and the link latency model.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type DomainId = usize;
pub type WorkerId = usize;
pub type StageId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Site {
    Edge,
    Cloud,
}

/// QoS tier. A worker serves its own tier and every tier below it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Slice {
    BestEffort,
    Embb,
    Urllc,
}

impl Slice {
    fn tier(self) -> u8 {
        match self {
            Slice::BestEffort => 0,
            Slice::Embb => 1,
            Slice::Urllc => 2,
        }
    }

    /// True when a worker provisioned for `self` may host a stage requiring `stage`.
    pub fn hosts(self, stage: Slice) -> bool {
        self.tier() >= stage.tier()
    }

    pub fn label(self) -> &'static str {
        match self {
            Slice::Urllc => "urllc",
            Slice::Embb => "embb",
            Slice::BestEffort => "best-effort",
        }
    }

    pub fn parse(s: &str) -> Result<Slice> {
        match s.to_ascii_lowercase().as_str() {
            "urllc" => Ok(Slice::Urllc),
            "embb" => Ok(Slice::Embb),
            "best-effort" | "be" => Ok(Slice::BestEffort),
            other => Err(Error::Config(format!("unknown slice '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkerSpec {
    pub worker_id: WorkerId,
    pub domain: DomainId,
    pub slice: Slice,
    /// Concurrent-load capacity c_i in load units.
    pub capacity: f64,
    /// Relative slowness factor: bids and service times scale with it.
    pub speed: f64,
    pub base_bid: f64,
}

impl WorkerSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.capacity > 0.0 && self.speed > 0.0 && self.base_bid > 0.0) {
            return Err(Error::Config(format!(
                "worker {} needs positive capacity, speed and base bid",
                self.worker_id
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub domain_id: DomainId,
    pub name: String,
    pub site: Site,
    pub role: String,
    pub workers: Vec<WorkerId>,
}

/// A message endpoint: a worker, or the broker/publisher side of a domain.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Endpoint {
    Worker(WorkerId),
    Domain(DomainId),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyModel {
    pub lan_ms: f64,
    pub wan_ms: f64,
    pub wan_jitter_ms: f64,
    pub urllc_delay_ms: f64,
    pub embb_delay_ms: f64,
    pub best_effort_delay_ms: f64,
}

impl Default for LatencyModel {
    fn default() -> Self {
        LatencyModel {
            lan_ms: 0.5,
            wan_ms: 50.0,
            wan_jitter_ms: 5.0,
            urllc_delay_ms: 1.0,
            embb_delay_ms: 5.0,
            best_effort_delay_ms: 0.0,
        }
    }
}

impl LatencyModel {
    pub fn slice_delay(&self, slice: Slice) -> f64 {
        match slice {
            Slice::Urllc => self.urllc_delay_ms,
            Slice::Embb => self.embb_delay_ms,
            Slice::BestEffort => self.best_effort_delay_ms,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lan_ms,
            self.wan_ms,
            self.wan_jitter_ms,
            self.urllc_delay_ms,
            self.embb_delay_ms,
            self.best_effort_delay_ms,
        ];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || self.wan_jitter_ms > self.wan_ms {
            return Err(Error::Config("latency values must be finite, >= 0 and jitter <= wan".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    pub domains: Vec<DomainSpec>,
    pub workers: Vec<WorkerSpec>,
    pub latency: LatencyModel,
}

pub const WORKERS_PER_DOMAIN: usize = 12;
pub const DEFAULT_CAPACITY: f64 = 4.0;
pub const DEFAULT_BASE_BID: f64 = 10.0;

impl Topology {
    /// Four domains of twelve workers: d1 (DU) and d2 (CU + near-RT RIC) at the
    /// edge site, d3 (non-RT RIC) and d4 (SMO) in the cloud.
    pub fn default_federation() -> Topology {
        let layout: [(&str, Site, &str); 4] = [
            ("d1", Site::Edge, "DU"),
            ("d2", Site::Edge, "CU+nearRT-RIC"),
            ("d3", Site::Cloud, "nonRT-RIC"),
            ("d4", Site::Cloud, "SMO"),
        ];
        let mut domains = Vec::new();
        let mut workers = Vec::new();
        for (d, (name, site, role)) in layout.iter().enumerate() {
            let mut ids = Vec::new();
            for j in 0..WORKERS_PER_DOMAIN {
                let id = d * WORKERS_PER_DOMAIN + j;
                let slice = match d {
                    0 => Slice::Urllc,
                    1 if j < WORKERS_PER_DOMAIN / 2 => Slice::Urllc,
                    1 | 2 => Slice::Embb,
                    _ => Slice::BestEffort,
                };
                workers.push(WorkerSpec {
                    worker_id: id,
                    domain: d,
                    slice,
                    capacity: DEFAULT_CAPACITY,
                    speed: 1.0,
                    base_bid: DEFAULT_BASE_BID,
                });
                ids.push(id);
            }
            domains.push(DomainSpec {
                domain_id: d,
                name: name.to_string(),
                site: *site,
                role: role.to_string(),
                workers: ids,
            });
        }
        Topology { domains, workers, latency: LatencyModel::default() }
    }

    pub fn validate(&self) -> Result<()> {
        self.latency.validate()?;
        for (i, w) in self.workers.iter().enumerate() {
            w.validate()?;
            if w.worker_id != i {
                return Err(Error::Config("worker ids must be dense and ordered".into()));
            }
            if w.domain >= self.domains.len() || !self.domains[w.domain].workers.contains(&i) {
                return Err(Error::Config(format!("worker {i} not registered with its domain")));
            }
        }
        let registered: usize = self.domains.iter().map(|d| d.workers.len()).sum();
        if registered != self.workers.len() {
            return Err(Error::Config("every worker must belong to exactly one domain".into()));
        }
        Ok(())
    }

    pub fn num_domains(&self) -> usize {
        self.domains.len()
    }

    pub fn domain_name(&self, d: DomainId) -> &str {
        &self.domains[d].name
    }

    pub fn domain_by_name(&self, name: &str) -> Option<DomainId> {
        self.domains.iter().position(|d| d.name == name)
    }

    pub fn site_of_domain(&self, d: DomainId) -> Site {
        self.domains[d].site
    }

    pub fn endpoint_site(&self, e: Endpoint) -> Site {
        match e {
            Endpoint::Worker(w) => self.domains[self.workers[w].domain].site,
            Endpoint::Domain(d) => self.domains[d].site,
        }
    }

    /// Jitter-free latency between two endpoints.
    pub fn expected_latency(&self, a: Endpoint, b: Endpoint) -> f64 {
        if a == b {
            return 0.0;
        }
        if self.endpoint_site(a) == self.endpoint_site(b) {
            self.latency.lan_ms
        } else {
            self.latency.wan_ms
        }
    }

    pub fn sample_link_latency<R: Rng + ?Sized>(&self, a: Endpoint, b: Endpoint, rng: &mut R) -> f64 {
        if a == b {
            return 0.0;
        }
        if self.endpoint_site(a) == self.endpoint_site(b) {
            self.latency.lan_ms
        } else {
            let j = self.latency.wan_jitter_ms;
            if j > 0.0 {
                rng.gen_range(self.latency.wan_ms - j..=self.latency.wan_ms + j)
            } else {
                self.latency.wan_ms
            }
        }
    }

    /// Edge workers become 2x slower and cloud workers 1.5x faster.
    pub fn apply_heterogeneity(&mut self) {
        for w in &mut self.workers {
            match self.domains[w.domain].site {
                Site::Edge => w.speed *= 2.0,
                Site::Cloud => w.speed *= 1.0 / 1.5,
            }
        }
    }
}
