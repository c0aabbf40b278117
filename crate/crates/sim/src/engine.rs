//! Event loop: arrivals, broker decisions, dispatch, FIFO workers, link
//! latencies, failures and the market's price exchange.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fedplace_core::dag::stage_type_registry;
use fedplace_core::dag::{PipelineTemplate, StageSpec};
use fedplace_core::federation::{
    mape_epoch, on_price_push_result, recovery_probe, BrokerState, EpochContext, EpochDecision, FederationEnv,
    GovernancePolicy, Outbound, PendingPipeline, SubscriptionSummary,
};
use fedplace_core::market::{
    cheapest_reservable, pipeline_types, LocalWorker, PriceSignalMsg, RejectReason, ReservationLedger, WorkerLoadView,
};
use fedplace_core::stats::nearest_rank;
use fedplace_core::strategies::{
    latency_greedy_place, locality_place, oracle_place, rr_place, sharded_oracle_place, spillover_place, PeerSnapshot,
    PlacementDecision, SnapshotWorker, TopologySnapshot,
};
use fedplace_core::topology::{DomainId, Endpoint, Slice, StageId, Topology, WorkerId};
use fedplace_core::Result;

use crate::config::{SimConfig, StrategyKind};
use crate::failure::{FailureKind, FailureTarget};
use crate::record::{PipelineRow, RunMeta, RunRecord, RunStats};
use crate::workload::poisson_arrivals;

const PENDING_VISIBLE: bool = true;
const STREAM_ARRIVALS: u64 = 1;
const STREAM_ORIGINS: u64 = 2;
const STREAM_NETWORK: u64 = 3;

/// Independent, reproducible RNG stream per purpose.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Debug)]
enum Ev {
    Arrival { pid: usize },
    Decide { pid: usize },
    Deliver { pid: usize, stage: StageId, from: Option<StageId>, epoch: u32, sent_at: f64, src: Endpoint },
    StageTimeout { pid: usize, stage: StageId, epoch: u32 },
    ServiceDone { worker: WorkerId, run: u64 },
    PriceDeliver { from: DomainId, to: DomainId, msg: PriceSignalMsg, summary: SubscriptionSummary },
    Epoch { domain: DomainId },
    HealthTick { domain: DomainId },
    Failure { idx: usize },
}

struct Scheduled {
    at: f64,
    seq: u64,
    ev: Ev,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Scheduled {}
impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Scheduled {
    // Reversed so the max-heap pops the earliest (time, sequence) first.
    fn cmp(&self, other: &Self) -> Ordering {
        other.at.total_cmp(&self.at).then(other.seq.cmp(&self.seq))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Status {
    Pending,
    Running,
    Completed,
    Failed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum StageStatus {
    Waiting,
    Queued,
    Running,
    Done,
}

struct Pipe {
    arrival: f64,
    origin: DomainId,
    /// Broker that ingests the pipeline's data and owns its recovery.
    broker: DomainId,
    /// Where the placement is decided: the broker itself, or the coordinator
    /// for centralised strategies.
    decider: DomainId,
    status: Status,
    accepted: bool,
    assignment: Vec<WorkerId>,
    stage: Vec<StageStatus>,
    epoch: Vec<u32>,
    received: Vec<u64>,
    /// An input of the stage crossed sites inside a partition window.
    crossed_in_partition: Vec<bool>,
    excluded: BTreeSet<DomainId>,
    done: usize,
    cost: Option<f64>,
    domains_crossed: usize,
    reason: Option<RejectReason>,
    latency: Option<f64>,
}

#[derive(Clone, Copy, Debug)]
struct Job {
    pid: usize,
    stage: StageId,
    epoch: u32,
}

struct WorkerRt {
    alive: bool,
    /// Death observed by the owning broker's health check.
    known_dead: bool,
    queue: VecDeque<Job>,
    busy: Option<(Job, u64)>,
    /// Queued plus in-service demand.
    load: f64,
    /// Demand of assigned stages whose inputs have not all arrived.
    pending: f64,
    /// Remote reservations made during the current market round.
    held: f64,
    runs: u64,
}

/// Shared network and worker state; the federation hooks of market brokers.
struct World {
    topo: Topology,
    workers: Vec<WorkerRt>,
    broker_alive: Vec<bool>,
    partitioned: bool,
}

impl World {
    fn link_ok(&self, a: Endpoint, b: Endpoint) -> bool {
        !self.partitioned || self.topo.endpoint_site(a) == self.topo.endpoint_site(b)
    }

    fn view_load(&self, w: WorkerId) -> f64 {
        let rt = &self.workers[w];
        rt.load + rt.held + if PENDING_VISIBLE { rt.pending } else { 0.0 }
    }

    fn broker_reachable(&self, from: DomainId, to: DomainId) -> bool {
        self.broker_alive[to] && self.link_ok(Endpoint::Domain(from), Endpoint::Domain(to))
    }

    /// Live workers of a domain as its broker knows them.
    fn local_workers(&self, domain: DomainId, now: f64) -> Vec<LocalWorker> {
        self.topo.domains[domain]
            .workers
            .iter()
            .filter(|&&w| !self.workers[w].known_dead)
            .map(|&w| LocalWorker {
                spec: self.topo.workers[w].clone(),
                view: WorkerLoadView { worker_id: w, load: self.view_load(w), observed_at: now },
            })
            .collect()
    }
}

impl FederationEnv for World {
    fn reachable(&self, from: DomainId, to: DomainId) -> bool {
        self.broker_reachable(from, to)
    }

    fn remote_reserve(&mut self, domain: DomainId, stage: &StageSpec) -> Option<(WorkerId, f64)> {
        let local = self.local_workers(domain, 0.0);
        let pick = cheapest_reservable(&local, stage, &ReservationLedger::default(), 0.99)?;
        self.workers[pick.0].held += stage.demand;
        Some(pick)
    }

    fn remote_release(&mut self, _domain: DomainId, worker: WorkerId, demand: f64) {
        self.workers[worker].held -= demand;
    }

    fn monitor(&self, domain: DomainId, now: f64) -> Vec<LocalWorker> {
        self.local_workers(domain, now)
    }
}

struct Sim<'c> {
    cfg: &'c SimConfig,
    template: PipelineTemplate,
    required: Vec<u64>,
    registry: Vec<(String, Slice)>,
    gov: GovernancePolicy,
    now: f64,
    seq: u64,
    queue: BinaryHeap<Scheduled>,
    world: World,
    brokers: Vec<BrokerState>,
    sent_history: Vec<VecDeque<(f64, PriceSignalMsg)>>,
    pipes: Vec<Pipe>,
    assigned_on: Vec<BTreeSet<(usize, StageId)>>,
    rr_cursor: usize,
    net_rng: ChaCha8Rng,
    partition_windows: Vec<(f64, f64)>,
    stats: RunStats,
    trace: Vec<String>,
    end_ms: f64,
}

/// Runs one cell. Deterministic in (config, seed).
pub fn run_sim(cfg: &SimConfig) -> Result<RunRecord> {
    cfg.validate()?;
    let mut sim = Sim::new(cfg);
    sim.run();
    Ok(sim.finish())
}

impl<'c> Sim<'c> {
    fn new(cfg: &'c SimConfig) -> Sim<'c> {
        let mut topo = cfg.topology.clone();
        if cfg.heterogeneity {
            topo.apply_heterogeneity();
        }
        let template = cfg.template.clone();
        let required = (0..template.len())
            .map(|v| {
                let preds: u64 = template.preds(v).map(|u| 1u64 << u).fold(0, |a, b| a | b);
                if preds == 0 {
                    1u64 << v
                } else {
                    preds
                }
            })
            .collect();
        let mut registry: BTreeMap<String, Slice> = stage_type_registry().into_iter().collect();
        for (t, s) in pipeline_types(&template) {
            registry.insert(t, s);
        }
        let gov = GovernancePolicy::for_scenario(cfg.governance, &topo);
        let brokers = (0..topo.num_domains()).map(|d| BrokerState::new(d, &topo, gov.clone())).collect();
        let n_workers = topo.workers.len();
        let n_domains = topo.num_domains();
        let world = World {
            workers: (0..n_workers)
                .map(|_| WorkerRt {
                    alive: true,
                    known_dead: false,
                    queue: VecDeque::new(),
                    busy: None,
                    load: 0.0,
                    pending: 0.0,
                    held: 0.0,
                    runs: 0,
                })
                .collect(),
            broker_alive: vec![true; n_domains],
            partitioned: false,
            topo,
        };
        let partition_windows =
            cfg.failures.partition_windows().into_iter().map(|(a, b)| (a * 1000.0, b * 1000.0)).collect();
        Sim {
            cfg,
            template,
            required,
            registry: registry.into_iter().collect(),
            gov,
            now: 0.0,
            seq: 0,
            queue: BinaryHeap::new(),
            world,
            brokers,
            sent_history: vec![VecDeque::new(); n_domains],
            pipes: Vec::new(),
            assigned_on: vec![BTreeSet::new(); n_workers],
            rr_cursor: 0,
            net_rng: stream_rng(cfg.seed, STREAM_NETWORK),
            partition_windows,
            stats: RunStats::default(),
            trace: Vec::new(),
            end_ms: (cfg.duration_s + cfg.drain_s) * 1000.0,
        }
    }

    fn schedule(&mut self, at: f64, ev: Ev) {
        self.seq += 1;
        self.queue.push(Scheduled { at: at.max(self.now), seq: self.seq, ev });
    }

    fn run(&mut self) {
        let cfg = self.cfg;
        let mut arr_rng = stream_rng(cfg.seed, STREAM_ARRIVALS);
        let mut org_rng = stream_rng(cfg.seed, STREAM_ORIGINS);
        let n_domains = self.world.topo.num_domains();
        let n = self.template.len();
        for t in poisson_arrivals(cfg.lambda_pps, cfg.duration_s * 1000.0, &mut arr_rng) {
            let origin = org_rng.gen_range(0..n_domains);
            let pid = self.pipes.len();
            self.pipes.push(Pipe {
                arrival: t,
                origin,
                broker: origin,
                decider: origin,
                status: Status::Pending,
                accepted: false,
                assignment: vec![usize::MAX; n],
                stage: vec![StageStatus::Waiting; n],
                epoch: vec![0; n],
                received: vec![0; n],
                crossed_in_partition: vec![false; n],
                excluded: BTreeSet::new(),
                done: 0,
                cost: None,
                domains_crossed: 0,
                reason: None,
                latency: None,
            });
            self.schedule(t, Ev::Arrival { pid });
        }
        for (idx, e) in cfg.failures.events.iter().enumerate() {
            self.schedule(e.at_s * 1000.0, Ev::Failure { idx });
        }
        if cfg.strategy == StrategyKind::Market {
            for d in 0..n_domains {
                self.schedule(0.0, Ev::Epoch { domain: d });
            }
        }
        for d in 0..n_domains {
            self.schedule(cfg.federation.delta_health_ms, Ev::HealthTick { domain: d });
        }
        while let Some(s) = self.queue.pop() {
            if s.at > self.end_ms {
                break;
            }
            debug_assert!(s.at >= self.now);
            self.now = s.at;
            self.stats.events += 1;
            if cfg.record_trace {
                self.trace.push(trace_line(s.at, &s.ev));
            }
            self.handle(s.ev);
        }
    }

    fn handle(&mut self, ev: Ev) {
        match ev {
            Ev::Arrival { pid } => self.on_arrival(pid),
            Ev::Decide { pid } => self.on_decide(pid),
            Ev::Deliver { pid, stage, from, epoch, sent_at, src } => {
                self.on_deliver(pid, stage, from, epoch, sent_at, src)
            }
            Ev::StageTimeout { pid, stage, epoch } => self.on_stage_timeout(pid, stage, epoch),
            Ev::ServiceDone { worker, run } => self.on_service_done(worker, run),
            Ev::PriceDeliver { from, to, msg, summary } => {
                if self.world.broker_reachable(from, to) {
                    let cap = self.cfg.federation.history_capacity();
                    if let Some(view) = self.brokers[to].peers.get_mut(&from) {
                        view.receive(msg, summary, self.now, cap);
                    }
                }
            }
            Ev::Epoch { domain } => {
                if self.world.broker_alive[domain] {
                    self.market_epoch(domain, None);
                }
                let next = self.now + self.cfg.federation.delta_prop_ms;
                if next <= self.end_ms {
                    self.schedule(next, Ev::Epoch { domain });
                }
            }
            Ev::HealthTick { domain } => self.on_health_tick(domain),
            Ev::Failure { idx } => self.on_failure(idx),
        }
    }

    /// Lowest-latency live broker for a dead one: same site first, then by id.
    fn failover(&self, dead: DomainId) -> Option<DomainId> {
        let topo = &self.world.topo;
        (0..topo.num_domains())
            .filter(|&d| self.world.broker_alive[d])
            .min_by_key(|&d| (topo.site_of_domain(d) != topo.site_of_domain(dead), d))
    }

    fn live_broker(&self, d: DomainId) -> Option<DomainId> {
        if self.world.broker_alive[d] {
            Some(d)
        } else {
            self.failover(d)
        }
    }

    fn on_arrival(&mut self, pid: usize) {
        self.stats.arrived += 1;
        let Some(b) = self.live_broker(self.pipes[pid].origin) else {
            self.reject(pid, RejectReason::Unreachable);
            return;
        };
        self.pipes[pid].broker = b;
        self.pipes[pid].decider = b;
        let decide_at = self.now + self.cfg.broker_decision_ms;
        if self.cfg.strategy.is_centralised() {
            let Some(coord) = self.live_broker(self.cfg.coordinator) else {
                self.reject(pid, RejectReason::Unreachable);
                return;
            };
            let (src, dst) = (Endpoint::Domain(b), Endpoint::Domain(coord));
            if !self.world.link_ok(src, dst) {
                self.stats.dropped_messages += 1;
                self.reject(pid, RejectReason::Unreachable);
                return;
            }
            let hop = self.world.topo.sample_link_latency(src, dst, &mut self.net_rng);
            self.pipes[pid].decider = coord;
            self.schedule(decide_at + hop, Ev::Decide { pid });
        } else {
            self.schedule(decide_at, Ev::Decide { pid });
        }
    }

    fn on_decide(&mut self, pid: usize) {
        if self.pipes[pid].status != Status::Pending {
            return;
        }
        let (Some(b), Some(decider)) =
            (self.live_broker(self.pipes[pid].broker), self.live_broker(self.pipes[pid].decider))
        else {
            self.reject(pid, RejectReason::Unreachable);
            return;
        };
        self.pipes[pid].broker = b;
        self.pipes[pid].decider = decider;
        if self.cfg.strategy == StrategyKind::Market {
            self.market_epoch(b, Some(pid));
            return;
        }
        let decision = self.central_or_heuristic(decider, b);
        if decision.accepted {
            self.dispatch(pid, decision.assignment, decision.total_cost);
        } else {
            self.reject(pid, decision.reject_reason.unwrap_or(RejectReason::Infeasible));
        }
    }

    fn snapshot(&self, origin: DomainId, include_domain: impl Fn(DomainId) -> bool) -> TopologySnapshot {
        let loads: Vec<f64> = (0..self.world.workers.len()).map(|w| self.world.view_load(w)).collect();
        let topo = &self.world.topo;
        TopologySnapshot::from_topology(
            topo,
            &loads,
            |w| !self.world.workers[w].known_dead && include_domain(topo.workers[w].domain),
            Some(origin),
        )
    }

    /// Non-market placement decided at `decider` for data entering at broker `b`.
    fn central_or_heuristic(&mut self, decider: DomainId, b: DomainId) -> PlacementDecision {
        let t = &self.template;
        let gov = &self.gov;
        let w = &self.cfg.weights;
        match self.cfg.strategy {
            StrategyKind::Oracle => oracle_place(t, &self.snapshot(b, |_| true), w, gov),
            StrategyKind::OracleSharded => {
                let own = self.snapshot(b, |d| d == decider);
                let loads: Vec<f64> = (0..self.world.workers.len()).map(|w| self.world.view_load(w)).collect();
                let pulled: Vec<PeerSnapshot> = (0..self.world.topo.num_domains())
                    .filter(|&d| d != decider)
                    .map(|d| PeerSnapshot {
                        domain: d,
                        workers: self.world.topo.domains[d]
                            .workers
                            .iter()
                            .filter(|&&x| !self.world.workers[x].known_dead)
                            .map(|&x| SnapshotWorker { spec: self.world.topo.workers[x].clone(), load: loads[x] })
                            .collect(),
                        timed_out: !self.world.broker_reachable(decider, d),
                    })
                    .collect();
                sharded_oracle_place(t, &own, &pulled, w, gov)
            }
            StrategyKind::RrGlobal => {
                let snap = self.snapshot(b, |_| true);
                rr_place(t, &snap, &mut self.rr_cursor, gov)
            }
            StrategyKind::Locality => locality_place(t, &self.snapshot(b, |d| d == b), gov),
            StrategyKind::LatencyGreedy => {
                latency_greedy_place(t, &self.snapshot(b, |d| d == b || self.world.broker_reachable(b, d)), gov)
            }
            StrategyKind::Spillover => {
                spillover_place(t, &self.snapshot(b, |d| d == b || self.world.broker_reachable(b, d)), gov)
            }
            StrategyKind::Market => unreachable!("market placement runs through the broker epoch"),
        }
    }

    /// A MAPE round at broker `b`, placing `pid` when given.
    fn market_epoch(&mut self, b: DomainId, pid: Option<usize>) {
        let inbox: Vec<PendingPipeline> = pid
            .map(|p| PendingPipeline {
                id: p as u64,
                template: self.template.clone(),
                excluded: self.pipes[p].excluded.clone(),
            })
            .into_iter()
            .collect();
        let ctx = EpochContext { market: &self.cfg.market, fed: &self.cfg.federation, registry: &self.registry };
        let out = mape_epoch(&mut self.brokers[b], self.now, &inbox, &mut self.world, &ctx);
        // Round commitments become physical load once the stages arrive.
        for w in self.world.workers.iter_mut() {
            w.held = 0.0;
        }
        self.exchange(b, out.outbound);
        for d in out.decisions {
            match d {
                EpochDecision::Placed { id, assignment, cost } => self.dispatch(id as usize, assignment, cost),
                EpochDecision::Rejected { id, reason } => self.reject(id as usize, reason),
                EpochDecision::Deferred { id, retry_at, unreachable } => {
                    self.stats.deferrals += 1;
                    self.pipes[id as usize].excluded.insert(unreachable);
                    self.schedule(retry_at, Ev::Decide { pid: id as usize });
                }
            }
        }
    }

    fn exchange(&mut self, b: DomainId, outbound: Vec<Outbound>) {
        let fed = &self.cfg.federation;
        let cap = fed.history_capacity();
        let mut pushed = None;
        for o in outbound {
            match o {
                Outbound::Push { to, price, summary } => {
                    let ok = self.world.broker_reachable(b, to);
                    if let Some(view) = self.brokers[b].peers.get_mut(&to) {
                        on_price_push_result(view, ok, fed.k_miss);
                    }
                    pushed = Some(price.clone());
                    if ok {
                        let lat = self.world.topo.sample_link_latency(
                            Endpoint::Domain(b),
                            Endpoint::Domain(to),
                            &mut self.net_rng,
                        );
                        self.schedule(self.now + lat, Ev::PriceDeliver { from: b, to, msg: price, summary });
                    } else {
                        self.stats.dropped_messages += 1;
                    }
                }
                Outbound::Probe { to } => {
                    let ok = self.world.broker_reachable(b, to);
                    let history: Vec<(f64, PriceSignalMsg)> = self.sent_history[to].iter().cloned().collect();
                    recovery_probe(&mut self.brokers[b], to, ok, &history, cap);
                }
            }
        }
        if let Some(p) = pushed {
            let h = &mut self.sent_history[b];
            h.push_back((self.now, p));
            while h.len() > cap {
                h.pop_front();
            }
        }
    }

    fn reject(&mut self, pid: usize, reason: RejectReason) {
        let p = &mut self.pipes[pid];
        p.status = Status::Failed;
        p.reason = Some(reason);
        self.stats.rejected += 1;
    }

    fn dispatch(&mut self, pid: usize, assignment: Vec<WorkerId>, cost: f64) {
        let topo = &self.world.topo;
        let domains: BTreeSet<DomainId> = assignment.iter().map(|&w| topo.workers[w].domain).collect();
        let p = &mut self.pipes[pid];
        p.status = Status::Running;
        p.accepted = true;
        p.cost = Some(cost);
        p.domains_crossed = domains.len().saturating_sub(1);
        p.assignment = assignment;
        for v in 0..p.assignment.len() {
            self.world.workers[p.assignment[v]].pending += self.template.stages[v].demand;
            self.assigned_on[p.assignment[v]].insert((pid, v));
        }
        self.stats.accepted += 1;
        let src = Endpoint::Domain(p.broker);
        for v in 0..self.template.len() {
            if self.template.is_source(v) {
                self.send(pid, v, None, src);
            }
        }
    }

    fn send(&mut self, pid: usize, v: StageId, from: Option<StageId>, src: Endpoint) {
        let w = self.pipes[pid].assignment[v];
        let lat = self.world.topo.sample_link_latency(src, Endpoint::Worker(w), &mut self.net_rng);
        let epoch = self.pipes[pid].epoch[v];
        self.schedule(self.now + lat, Ev::Deliver { pid, stage: v, from, epoch, sent_at: self.now, src });
    }

    fn in_partition_window(&self, t: f64) -> bool {
        self.partition_windows.iter().any(|&(a, b)| t >= a && t < b)
    }

    fn on_deliver(&mut self, pid: usize, v: StageId, from: Option<StageId>, epoch: u32, sent_at: f64, src: Endpoint) {
        let p = &self.pipes[pid];
        if p.status != Status::Running || p.epoch[v] != epoch || p.stage[v] != StageStatus::Waiting {
            return;
        }
        let w = p.assignment[v];
        let dst = Endpoint::Worker(w);
        if !self.world.workers[w].alive || !self.world.link_ok(src, dst) {
            self.stats.dropped_messages += 1;
            let at = sent_at + self.cfg.federation.tau_fed_ms;
            self.schedule(at, Ev::StageTimeout { pid, stage: v, epoch });
            return;
        }
        let crossed = self.world.topo.endpoint_site(src) != self.world.topo.endpoint_site(dst)
            && self.in_partition_window(self.now);
        if crossed {
            self.stats.cross_site_deliveries_in_partition += 1;
        }
        let bit = 1u64 << from.unwrap_or(v);
        let p = &mut self.pipes[pid];
        p.crossed_in_partition[v] |= crossed;
        p.received[v] |= bit;
        if p.received[v] == self.required[v] {
            self.enqueue(w, Job { pid, stage: v, epoch });
        }
    }

    /// Workers never refuse work. The dispatch is acknowledged when the stage
    /// finishes, so a stage stuck in a long queue times out.
    fn enqueue(&mut self, w: WorkerId, job: Job) {
        let at = self.now + self.cfg.federation.tau_fed_ms;
        self.schedule(at, Ev::StageTimeout { pid: job.pid, stage: job.stage, epoch: job.epoch });
        self.pipes[job.pid].stage[job.stage] = StageStatus::Queued;
        self.world.workers[w].load += self.template.stages[job.stage].demand;
        self.world.workers[w].pending -= self.template.stages[job.stage].demand;
        self.world.workers[w].queue.push_back(job);
        if self.world.workers[w].busy.is_none() {
            self.start_next(w);
        }
    }

    fn job_live(&self, job: &Job) -> bool {
        let p = &self.pipes[job.pid];
        p.status == Status::Running && p.epoch[job.stage] == job.epoch
    }

    fn start_next(&mut self, w: WorkerId) {
        if let Some(job) = self.world.workers[w].queue.pop_front() {
            // Round-robin workers are never told a pipeline failed, so they
            // serve dead jobs too.
            let live = self.job_live(&job);
            let spec = &self.world.topo.workers[w];
            let service = self.cfg.base_service_ms * spec.speed + self.world.topo.latency.slice_delay(spec.slice);
            let rt = &mut self.world.workers[w];
            rt.runs += 1;
            let run = rt.runs;
            rt.busy = Some((job, run));
            if live {
                self.pipes[job.pid].stage[job.stage] = StageStatus::Running;
            }
            self.schedule(self.now + service, Ev::ServiceDone { worker: w, run });
        }
    }

    fn on_service_done(&mut self, w: WorkerId, run: u64) {
        let rt = &mut self.world.workers[w];
        let Some((job, r)) = rt.busy else { return };
        if !rt.alive || r != run {
            return;
        }
        rt.busy = None;
        rt.load -= self.template.stages[job.stage].demand;
        if self.job_live(&job) {
            self.complete_stage(job.pid, job.stage, w);
        }
        self.start_next(w);
    }

    /// Detaches stage `v` from its worker. Replanning strategies also
    /// withdraw the job if it is still queued; a running job finishes.
    fn release(&mut self, pid: usize, v: StageId) {
        let p = &self.pipes[pid];
        let w = p.assignment[v];
        if p.stage[v] == StageStatus::Waiting {
            self.world.workers[w].pending -= self.template.stages[v].demand;
        }
        if p.stage[v] == StageStatus::Queued && self.cfg.strategy.replans() {
            let epoch = p.epoch[v];
            let rt = &mut self.world.workers[w];
            let before = rt.queue.len();
            rt.queue.retain(|j| !(j.pid == pid && j.stage == v && j.epoch == epoch));
            if rt.queue.len() < before {
                rt.load -= self.template.stages[v].demand;
            }
        }
        self.assigned_on[w].remove(&(pid, v));
    }

    fn complete_stage(&mut self, pid: usize, v: StageId, w: WorkerId) {
        self.release(pid, v);
        if self.pipes[pid].crossed_in_partition[v] {
            self.stats.cross_site_completions_in_partition += 1;
        }
        let p = &mut self.pipes[pid];
        p.stage[v] = StageStatus::Done;
        p.done += 1;
        if p.done == self.template.len() {
            p.status = Status::Completed;
            p.latency = Some(self.now - p.arrival);
            self.stats.completed += 1;
            return;
        }
        let succs: Vec<StageId> = self.template.succs(v).collect();
        for s in succs {
            self.send(pid, s, Some(v), Endpoint::Worker(w));
        }
    }

    fn fail(&mut self, pid: usize, reason: RejectReason) {
        if self.pipes[pid].status != Status::Running {
            return;
        }
        for v in 0..self.template.len() {
            if self.pipes[pid].stage[v] != StageStatus::Done {
                self.release(pid, v);
            }
        }
        let p = &mut self.pipes[pid];
        p.status = Status::Failed;
        p.reason = Some(reason);
        self.stats.failed += 1;
    }

    fn on_stage_timeout(&mut self, pid: usize, v: StageId, epoch: u32) {
        let p = &self.pipes[pid];
        if p.status != Status::Running || p.epoch[v] != epoch || p.stage[v] == StageStatus::Done {
            return;
        }
        if self.cfg.strategy.replans() {
            let avoid = p.assignment[v];
            self.replace(pid, v, Some(avoid));
        } else {
            let reason =
                if p.stage[v] == StageStatus::Waiting { RejectReason::Unreachable } else { RejectReason::TimedOut };
            self.fail(pid, reason);
        }
    }

    /// Moves stage `v` to a new worker and re-sends its inputs. Outputs of
    /// predecessors on dead workers are recomputed.
    fn replace(&mut self, pid: usize, v: StageId, avoid: Option<WorkerId>) {
        if self.pipes[pid].status != Status::Running {
            return;
        }
        let was_done = self.pipes[pid].stage[v] == StageStatus::Done;
        self.release(pid, v);
        {
            let p = &mut self.pipes[pid];
            p.epoch[v] += 1;
            p.received[v] = 0;
            p.crossed_in_partition[v] = false;
            p.stage[v] = StageStatus::Waiting;
            if was_done {
                p.done -= 1;
            }
        }
        let Some(w) = self.choose_replacement(pid, v, avoid) else {
            self.fail(pid, RejectReason::WorkerLost);
            return;
        };
        self.stats.replacements += 1;
        self.world.workers[w].pending += self.template.stages[v].demand;
        let p = &mut self.pipes[pid];
        p.assignment[v] = w;
        self.assigned_on[w].insert((pid, v));
        if self.template.is_source(v) {
            let src = Endpoint::Domain(self.pipes[pid].broker);
            self.send(pid, v, None, src);
            return;
        }
        let preds: Vec<StageId> = self.template.preds(v).collect();
        for u in preds {
            if self.pipes[pid].stage[u] != StageStatus::Done {
                continue;
            }
            let wu = self.pipes[pid].assignment[u];
            if self.world.workers[wu].alive {
                self.send(pid, v, Some(u), Endpoint::Worker(wu));
            } else {
                self.replace(pid, u, Some(wu));
                if self.pipes[pid].status != Status::Running {
                    return;
                }
            }
        }
    }

    /// Cheapest reservable worker reachable from the stage's input senders,
    /// searching the responsible broker's domain first, then peers by
    /// distance.
    fn choose_replacement(&self, pid: usize, v: StageId, avoid: Option<WorkerId>) -> Option<WorkerId> {
        let p = &self.pipes[pid];
        let b = p.broker;
        let topo = &self.world.topo;
        let stage = &self.template.stages[v];
        let mut senders = Vec::new();
        if self.template.is_source(v) {
            senders.push(Endpoint::Domain(b));
        }
        for u in self.template.preds(v) {
            if p.stage[u] == StageStatus::Done && self.world.workers[p.assignment[u]].alive {
                senders.push(Endpoint::Worker(p.assignment[u]));
            }
        }
        let pinned = self.gov.pinned(stage, b);
        let mut domains: Vec<DomainId> =
            (0..topo.num_domains()).filter(|&d| d == b || (!pinned && self.world.broker_reachable(b, d))).collect();
        domains.sort_by_key(|&d| (d != b, topo.site_of_domain(d) != topo.site_of_domain(b), d));
        for d in domains {
            let candidates: Vec<LocalWorker> = self
                .world
                .local_workers(d, self.now)
                .into_iter()
                .filter(|lw| {
                    let w = lw.spec.worker_id;
                    Some(w) != avoid && senders.iter().all(|s| self.world.link_ok(*s, Endpoint::Worker(w)))
                })
                .collect();
            if let Some((w, _)) = cheapest_reservable(&candidates, stage, &ReservationLedger::default(), 0.99) {
                return Some(w);
            }
        }
        None
    }

    fn on_health_tick(&mut self, d: DomainId) {
        if self.world.broker_alive[d] {
            let ws = self.world.topo.domains[d].workers.clone();
            for w in ws {
                if self.world.workers[w].alive || self.world.workers[w].known_dead {
                    continue;
                }
                self.world.workers[w].known_dead = true;
                let affected: Vec<(usize, StageId)> = self.assigned_on[w].iter().copied().collect();
                for (pid, v) in affected {
                    if self.pipes[pid].status != Status::Running || self.pipes[pid].assignment[v] != w {
                        continue;
                    }
                    if self.cfg.strategy.replans() {
                        self.replace(pid, v, Some(w));
                    } else {
                        self.fail(pid, RejectReason::WorkerLost);
                    }
                }
            }
        }
        let next = self.now + self.cfg.federation.delta_health_ms;
        if next <= self.end_ms {
            self.schedule(next, Ev::HealthTick { domain: d });
        }
    }

    fn on_failure(&mut self, idx: usize) {
        let e = self.cfg.failures.events[idx].clone();
        match e.kind {
            FailureKind::WorkerKill => {
                let targets: Vec<WorkerId> = match e.target {
                    FailureTarget::Domain(d) => self.world.topo.domains[d].workers.clone(),
                    FailureTarget::Workers(ws) => ws,
                    FailureTarget::None => Vec::new(),
                };
                for w in targets {
                    let rt = &mut self.world.workers[w];
                    rt.alive = false;
                    rt.busy = None;
                    rt.queue.clear();
                    rt.load = 0.0;
                }
            }
            FailureKind::BrokerKill => {
                if let FailureTarget::Domain(d) = e.target {
                    self.world.broker_alive[d] = false;
                    self.brokers[d].alive = false;
                }
            }
            FailureKind::PartitionStart => self.world.partitioned = true,
            FailureKind::PartitionEnd => self.world.partitioned = false,
            FailureKind::HeterogeneityProfile => self.world.topo.apply_heterogeneity(),
        }
    }

    fn finish(self) -> RunRecord {
        let cfg = self.cfg;
        let topo = &self.world.topo;
        let (lo, hi) = (cfg.warmup_s * 1000.0, cfg.duration_s * 1000.0);
        let mut stats = self.stats;
        stats.in_flight_at_end = self.pipes.iter().filter(|p| p.status == Status::Running).count();
        let rows = self
            .pipes
            .iter()
            .enumerate()
            .filter(|(_, p)| p.arrival >= lo && p.arrival < hi)
            .map(|(i, p)| {
                let completed = p.status == Status::Completed;
                let reason = match p.status {
                    Status::Completed => None,
                    Status::Running | Status::Pending => Some("in-flight".to_string()),
                    Status::Failed => p.reason.map(|r| r.label().to_string()),
                };
                PipelineRow {
                    pipeline_id: i as u64,
                    arrival_time_ms: round3(p.arrival),
                    origin: topo.domain_name(p.origin).to_string(),
                    strategy: cfg.strategy.name().to_string(),
                    accepted: p.accepted,
                    completed,
                    end_to_end_latency_ms: p.latency.map(round3),
                    domains_crossed: p.domains_crossed,
                    placement_cost: p.cost.map(round3),
                    reject_reason: reason,
                }
            })
            .collect();
        RunRecord {
            meta: RunMeta {
                strategy: cfg.strategy.name().to_string(),
                pipeline_kind: cfg.template.name.clone(),
                lambda: cfg.lambda_pps,
                seed: cfg.seed,
                scenario: cfg.governance.label().to_string(),
                failures: cfg.failures.label(topo),
                heterogeneity: cfg.heterogeneity,
            },
            rows,
            stats,
            trace: self.trace,
        }
    }
}

/// Fixed precision keeps CSV output stable.
fn round3(x: f64) -> f64 {
    (x * 1000.0).round() / 1000.0
}

fn trace_line(at: f64, ev: &Ev) -> String {
    match ev {
        Ev::PriceDeliver { from, to, msg, .. } => format!("{at:.6} price {from}->{to} issued {:.6}", msg.issued_at),
        other => format!("{at:.6} {other:?}"),
    }
}

/// p-quantile of the sampled link latencies between two endpoints, used by tests.
pub fn latency_quantile(topo: &Topology, a: Endpoint, b: Endpoint, q: f64, samples: usize, seed: u64) -> Option<f64> {
    let mut rng = stream_rng(seed, STREAM_NETWORK);
    let mut v: Vec<f64> = (0..samples).map(|_| topo.sample_link_latency(a, b, &mut rng)).collect();
    v.sort_by(f64::total_cmp);
    nearest_rank(&v, q)
}
