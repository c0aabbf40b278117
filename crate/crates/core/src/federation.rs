//! Broker state, governance, peer knowledge with bounded staleness, liveness
//! tracking, summary-based routing and the per-broker MAPE epoch.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::dag::{PipelineTemplate, Sovereignty, StageSpec};
use crate::error::{Error, Result};
use crate::market::{
    clearing_prices, local_bids, market_place, ClearingPriceTable, LocalWorker, MarketConfig, PriceSignalMsg,
    RejectReason, ReservationLedger, StagePlacement,
};
use crate::topology::{DomainId, Site, Slice, Topology, WorkerId};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FederationConfig {
    pub delta_prop_ms: f64,
    pub delta_health_ms: f64,
    pub tau_fed_ms: f64,
    pub k_miss: u32,
    pub wan_max_ms: f64,
    pub recovery_probe_every: u64,
}

impl Default for FederationConfig {
    fn default() -> Self {
        FederationConfig {
            delta_prop_ms: 10_000.0,
            delta_health_ms: 5_000.0,
            tau_fed_ms: 5_000.0,
            k_miss: 3,
            wan_max_ms: 50.0,
            recovery_probe_every: 5,
        }
    }
}

impl FederationConfig {
    /// Staleness bound B.
    pub fn staleness_bound(&self) -> f64 {
        self.delta_prop_ms + self.wan_max_ms
    }

    pub fn history_capacity(&self) -> usize {
        (self.staleness_bound() / self.delta_prop_ms).ceil() as usize + 1
    }

    pub fn validate(&self) -> Result<()> {
        let times = [self.delta_prop_ms, self.delta_health_ms, self.tau_fed_ms];
        if times.iter().any(|t| !(*t > 0.0)) || !(self.wan_max_ms >= 0.0) {
            return Err(Error::Config("federation periods must be positive".into()));
        }
        if self.k_miss == 0 || self.recovery_probe_every == 0 {
            return Err(Error::Config("k_miss and recovery_probe_every must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryCluster {
    pub centroid: Vec<f64>,
    pub radius: f64,
    pub capacity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubscriptionSummary {
    pub origin_domain: DomainId,
    pub clusters: Vec<SummaryCluster>,
}

pub const CONTENT_DIM: usize = 8;

/// Fixed synthetic content vector of a stage type (unit norm).
pub fn content_vector(stage_type: &str) -> Vec<f64> {
    // FNV-1a seeds a small linear congruential stream per type.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in stage_type.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut v = Vec::with_capacity(CONTENT_DIM);
    for _ in 0..CONTENT_DIM {
        h = h.wrapping_mul(6_364_136_223_846_793_005).wrapping_add(1_442_695_040_888_963_407);
        v.push(((h >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0);
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / norm).collect()
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PeerView {
    pub peer_domain: DomainId,
    pub last_price: Option<PriceSignalMsg>,
    pub last_summary: Option<SubscriptionSummary>,
    pub consecutive_misses: u32,
    pub healthy: bool,
    pub price_history: VecDeque<(f64, PriceSignalMsg)>,
}

impl PeerView {
    pub fn new(peer_domain: DomainId) -> PeerView {
        PeerView {
            peer_domain,
            last_price: None,
            last_summary: None,
            consecutive_misses: 0,
            healthy: true,
            price_history: VecDeque::new(),
        }
    }

    /// Records a received push, keeping at most `cap` history entries.
    pub fn receive(&mut self, msg: PriceSignalMsg, summary: SubscriptionSummary, received_at: f64, cap: usize) {
        if !self.healthy {
            return;
        }
        self.price_history.push_back((received_at, msg.clone()));
        while self.price_history.len() > cap {
            self.price_history.pop_front();
        }
        self.last_price = Some(msg);
        self.last_summary = Some(summary);
    }

    /// The peer's price if healthy and no older than `bound` at `now`.
    pub fn fresh_price(&self, now: f64, bound: f64) -> Option<&PriceSignalMsg> {
        if !self.healthy {
            return None;
        }
        self.last_price.as_ref().filter(|p| now - p.issued_at <= bound)
    }
}

pub fn on_price_push_result(view: &mut PeerView, success: bool, k_miss: u32) {
    if success {
        view.consecutive_misses = 0;
        view.healthy = true;
        return;
    }
    view.consecutive_misses += 1;
    if view.consecutive_misses >= k_miss && view.healthy {
        view.healthy = false;
        view.last_price = None;
        view.last_summary = None;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum GovScenario {
    A,
    B,
    C,
    D,
}

impl GovScenario {
    pub const ALL: [GovScenario; 4] = [GovScenario::A, GovScenario::B, GovScenario::C, GovScenario::D];

    pub fn parse(s: &str) -> Result<GovScenario> {
        match s {
            "A" | "a" => Ok(GovScenario::A),
            "B" | "b" => Ok(GovScenario::B),
            "C" | "c" => Ok(GovScenario::C),
            "D" | "d" => Ok(GovScenario::D),
            other => Err(Error::Config(format!("unknown governance scenario '{other}'"))),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            GovScenario::A => "A",
            GovScenario::B => "B",
            GovScenario::C => "C",
            GovScenario::D => "D",
        }
    }

    fn site_enforces(self, site: Site) -> bool {
        match self {
            GovScenario::A => false,
            GovScenario::B => site == Site::Edge,
            GovScenario::C => site == Site::Cloud,
            GovScenario::D => true,
        }
    }
}

/// Final reporting / logging stage types whose inputs stay in the origin
/// domain when that domain enforces sovereignty.
pub const DEFAULT_LOCAL_ONLY_TYPES: [&str; 3] = ["SMO:report", "RIC:log", "SMO:handover_optimise"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GovernancePolicy {
    pub local_only_types: BTreeSet<String>,
    pub trust: BTreeMap<DomainId, f64>,
    pub scenario: GovScenario,
    pub enforcing: BTreeSet<DomainId>,
}

impl GovernancePolicy {
    /// No domain enforces; only explicit `LocalOnly` stage tags pin stages.
    pub fn none() -> GovernancePolicy {
        GovernancePolicy {
            local_only_types: BTreeSet::new(),
            trust: BTreeMap::new(),
            scenario: GovScenario::A,
            enforcing: BTreeSet::new(),
        }
    }

    pub fn for_scenario(scenario: GovScenario, topo: &Topology) -> GovernancePolicy {
        GovernancePolicy {
            local_only_types: DEFAULT_LOCAL_ONLY_TYPES.iter().map(|s| s.to_string()).collect(),
            trust: topo.domains.iter().map(|d| (d.domain_id, 1.0)).collect(),
            scenario,
            enforcing: topo.domains.iter().filter(|d| scenario.site_enforces(d.site)).map(|d| d.domain_id).collect(),
        }
    }

    pub fn enforces(&self, d: DomainId) -> bool {
        self.enforcing.contains(&d)
    }

    /// Whether the stage must stay in its origin domain.
    pub fn pinned(&self, stage: &StageSpec, origin: DomainId) -> bool {
        stage.sovereignty == Sovereignty::LocalOnly
            || (self.enforces(origin) && self.local_only_types.contains(&stage.stage_type))
    }

    pub fn trust_in(&self, d: DomainId) -> f64 {
        self.trust.get(&d).copied().unwrap_or(1.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BrokerState {
    pub domain: DomainId,
    pub workers: Vec<LocalWorker>,
    pub peers: BTreeMap<DomainId, PeerView>,
    pub clearing: ClearingPriceTable,
    pub ledger: ReservationLedger,
    pub rr_cursor: usize,
    pub governance: GovernancePolicy,
    pub mape_epoch_counter: u64,
    /// Price-push rounds completed; recovery probes run every few rounds.
    pub push_rounds: u64,
    pub next_push_at: f64,
    pub alive: bool,
}

impl BrokerState {
    pub fn new(domain: DomainId, topo: &Topology, governance: GovernancePolicy) -> BrokerState {
        BrokerState {
            domain,
            workers: topo.domains[domain]
                .workers
                .iter()
                .map(|&w| LocalWorker {
                    spec: topo.workers[w].clone(),
                    view: crate::market::WorkerLoadView { worker_id: w, load: 0.0, observed_at: 0.0 },
                })
                .collect(),
            peers: topo
                .domains
                .iter()
                .filter(|d| d.domain_id != domain)
                .map(|d| (d.domain_id, PeerView::new(d.domain_id)))
                .collect(),
            clearing: ClearingPriceTable::default(),
            ledger: ReservationLedger::default(),
            rr_cursor: 0,
            governance,
            mape_epoch_counter: 0,
            push_rounds: 0,
            next_push_at: 0.0,
            alive: true,
        }
    }

    /// Price signal over every registered stage type, for peers.
    pub fn price_signal(&self, types: &[(String, Slice)], cap: f64, now: f64) -> PriceSignalMsg {
        let bids = local_bids(&self.workers, types, &ReservationLedger::default(), cap);
        let table = clearing_prices(&bids, &BTreeMap::new(), now);
        PriceSignalMsg { origin_domain: self.domain, prices: table.prices, issued_at: now }
    }

    /// One cluster per servable stage type; capacity is the free load of the
    /// eligible workers.
    pub fn summary(&self, types: &[(String, Slice)]) -> SubscriptionSummary {
        let clusters = types
            .iter()
            .filter_map(|(ty, slice)| {
                let free: f64 = self
                    .workers
                    .iter()
                    .filter(|w| w.spec.slice.hosts(*slice))
                    .map(|w| (w.spec.capacity - w.view.load).max(0.0))
                    .sum();
                let eligible = self.workers.iter().any(|w| w.spec.slice.hosts(*slice));
                eligible.then(|| SummaryCluster { centroid: content_vector(ty), radius: 0.0, capacity: free })
            })
            .collect();
        SubscriptionSummary { origin_domain: self.domain, clusters }
    }
}

/// Match threshold: accepts the centroid of the requested type only.
pub const DEFAULT_MATCH_THRESHOLD: f64 = 1e-6;

/// Candidate peers for a publication, ranked by centroid distance.
pub fn route_publication(broker: &BrokerState, content: &[f64], min_trust: f64, threshold: f64) -> Vec<DomainId> {
    let mut ranked: Vec<(f64, DomainId)> = broker
        .peers
        .values()
        .filter(|p| p.healthy && broker.governance.trust_in(p.peer_domain) >= min_trust)
        .filter_map(|p| {
            let s = p.last_summary.as_ref()?;
            let d = s
                .clusters
                .iter()
                .filter(|c| c.capacity > 0.0)
                .map(|c| (distance(content, &c.centroid) - c.radius).max(0.0))
                .min_by(f64::total_cmp)?;
            (d <= threshold).then_some((d, p.peer_domain))
        })
        .collect();
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    ranked.into_iter().map(|x| x.1).collect()
}

/// Recovery probe towards an unhealthy peer. On success the peer is healthy
/// again and both histories are merged by timestamp.
pub fn recovery_probe(
    broker: &mut BrokerState,
    peer: DomainId,
    reachable: bool,
    peer_history: &[(f64, PriceSignalMsg)],
    cap: usize,
) -> bool {
    let Some(view) = broker.peers.get_mut(&peer) else {
        return false;
    };
    if view.healthy || !reachable {
        return false;
    }
    view.healthy = true;
    view.consecutive_misses = 0;
    let mut merged: Vec<(f64, PriceSignalMsg)> =
        view.price_history.iter().cloned().chain(peer_history.iter().cloned()).collect();
    merged.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.origin_domain.cmp(&b.1.origin_domain)));
    merged.dedup_by(|a, b| a.0 == b.0 && a.1 == b.1);
    let skip = merged.len().saturating_sub(cap);
    view.price_history = merged.into_iter().skip(skip).collect();
    true
}

/// Result of a dispatch RPC under the federation timeout.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DispatchOutcome {
    Ack { at: f64 },
    Timeout { at: f64 },
}

/// Acked after the link latency when the target is reachable, otherwise a
/// timeout exactly `tau_fed` after sending.
pub fn dispatch_with_timeout(sent_at: f64, reachable: bool, link_ms: f64, tau_fed: f64) -> DispatchOutcome {
    if reachable && link_ms <= tau_fed {
        DispatchOutcome::Ack { at: sent_at + link_ms }
    } else {
        DispatchOutcome::Timeout { at: sent_at + tau_fed }
    }
}

/// Hooks a broker uses to reach the rest of the federation.
pub trait FederationEnv {
    /// Whether an RPC from broker `from` to broker `to` is acknowledged now.
    fn reachable(&self, from: DomainId, to: DomainId) -> bool;
    /// Asks broker `domain` to reserve a worker for `stage`.
    fn remote_reserve(&mut self, domain: DomainId, stage: &StageSpec) -> Option<(WorkerId, f64)>;
    /// Undoes a reservation the caller abandoned.
    fn remote_release(&mut self, domain: DomainId, worker: WorkerId, demand: f64);
    /// Current load views of the caller's own live workers.
    fn monitor(&self, domain: DomainId, now: f64) -> Vec<LocalWorker>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct PendingPipeline {
    pub id: u64,
    pub template: PipelineTemplate,
    /// Peers found unreachable while planning this pipeline.
    pub excluded: BTreeSet<DomainId>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum EpochDecision {
    Placed {
        id: u64,
        assignment: Vec<WorkerId>,
        cost: f64,
    },
    Rejected {
        id: u64,
        reason: RejectReason,
    },
    /// A chosen peer did not answer; retry once the timeout has elapsed.
    Deferred {
        id: u64,
        retry_at: f64,
        unreachable: DomainId,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub enum Outbound {
    Push { to: DomainId, price: PriceSignalMsg, summary: SubscriptionSummary },
    Probe { to: DomainId },
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpochOutput {
    pub decisions: Vec<EpochDecision>,
    pub outbound: Vec<Outbound>,
    /// Committed local reservations of the round.
    pub committed: BTreeMap<WorkerId, f64>,
}

/// Shared settings for an epoch.
#[derive(Clone, Debug)]
pub struct EpochContext<'a> {
    pub market: &'a MarketConfig,
    pub fed: &'a FederationConfig,
    pub registry: &'a [(String, Slice)],
}

/// Peers whose fresh price and summary make them candidates for `stage`.
pub fn candidate_signals(
    broker: &BrokerState,
    stage: &StageSpec,
    excluded: &BTreeSet<DomainId>,
    now: f64,
    bound: f64,
) -> Vec<PriceSignalMsg> {
    let routed = route_publication(broker, &content_vector(&stage.stage_type), 0.0, DEFAULT_MATCH_THRESHOLD);
    routed
        .into_iter()
        .filter(|d| !excluded.contains(d))
        .filter_map(|d| broker.peers[&d].fresh_price(now, bound).cloned())
        .collect()
}

/// One MAPE round of a market broker: monitor local loads, price the epoch's
/// demand, place each pending pipeline in arrival order, push prices when
/// due and commit the ledger.
pub fn mape_epoch(
    broker: &mut BrokerState,
    now: f64,
    inbox: &[PendingPipeline],
    env: &mut dyn FederationEnv,
    ctx: &EpochContext<'_>,
) -> EpochOutput {
    let mut out = EpochOutput::default();
    broker.mape_epoch_counter += 1;
    // Monitor
    broker.workers = env.monitor(broker.domain, now);
    // Analyse
    let mut demand: BTreeMap<String, usize> = BTreeMap::new();
    for p in inbox {
        for s in &p.template.stages {
            *demand.entry(s.stage_type.clone()).or_insert(0) += 1;
        }
    }
    let bids = local_bids(&broker.workers, ctx.registry, &broker.ledger, ctx.market.utilisation_cap);
    broker.clearing = clearing_prices(&bids, &demand, now);
    // Plan
    let bound = ctx.fed.staleness_bound();
    for p in inbox {
        out.decisions.push(plan_market(broker, now, p, env, ctx, &demand, bound));
    }
    // Execute: periodic price exchange and recovery probes.
    if now >= broker.next_push_at {
        broker.push_rounds += 1;
        broker.next_push_at = now + ctx.fed.delta_prop_ms;
        let price = broker.price_signal(ctx.registry, ctx.market.utilisation_cap, now);
        let summary = broker.summary(ctx.registry);
        let probe_round = broker.push_rounds.is_multiple_of(ctx.fed.recovery_probe_every);
        for (&d, view) in &broker.peers {
            if view.healthy {
                out.outbound.push(Outbound::Push { to: d, price: price.clone(), summary: summary.clone() });
            } else if probe_round {
                out.outbound.push(Outbound::Probe { to: d });
            }
        }
    }
    // Knowledge
    out.committed = broker.ledger.commit();
    out
}

fn plan_market(
    broker: &mut BrokerState,
    now: f64,
    p: &PendingPipeline,
    env: &mut dyn FederationEnv,
    ctx: &EpochContext<'_>,
    demand: &BTreeMap<String, usize>,
    bound: f64,
) -> EpochDecision {
    let mut excluded = p.excluded.clone();
    // Peers that refuse a reservation are dropped and the pipeline re-planned.
    loop {
        let peers: Vec<PriceSignalMsg> = {
            let mut all: BTreeMap<DomainId, PriceSignalMsg> = BTreeMap::new();
            for s in &p.template.stages {
                for sig in candidate_signals(broker, s, &excluded, now, bound) {
                    all.entry(sig.origin_domain).or_insert(sig);
                }
            }
            all.into_values().collect()
        };
        let mut ledger = broker.ledger.clone();
        let plan = match market_place(
            &p.template,
            broker.domain,
            &broker.workers,
            &peers,
            ctx.market,
            &broker.governance,
            &mut ledger,
            demand,
            now,
        ) {
            Ok(plan) => plan,
            Err(reason) => return EpochDecision::Rejected { id: p.id, reason },
        };
        let mut assignment = vec![usize::MAX; p.template.len()];
        let mut remote_done: Vec<(DomainId, WorkerId, f64)> = Vec::new();
        let mut failed: Option<(DomainId, bool)> = None;
        for (v, sp) in plan.stages.iter().enumerate() {
            match sp {
                StagePlacement::Local { worker, .. } => assignment[v] = *worker,
                StagePlacement::Remote { domain, .. } => {
                    if !env.reachable(broker.domain, *domain) {
                        failed = Some((*domain, false));
                        break;
                    }
                    match env.remote_reserve(*domain, &p.template.stages[v]) {
                        Some((w, _)) => {
                            assignment[v] = w;
                            remote_done.push((*domain, w, p.template.stages[v].demand));
                        }
                        None => {
                            failed = Some((*domain, true));
                            break;
                        }
                    }
                }
            }
        }
        match failed {
            None => {
                broker.ledger = ledger;
                return EpochDecision::Placed { id: p.id, assignment, cost: plan.total_cost };
            }
            Some((d, answered)) => {
                // Roll back peer reservations made for this attempt.
                for (dom, w, demand) in remote_done {
                    env.remote_release(dom, w, demand);
                }
                if !answered {
                    return EpochDecision::Deferred { id: p.id, retry_at: now + ctx.fed.tau_fed_ms, unreachable: d };
                }
                excluded.insert(d);
            }
        }
    }
}
