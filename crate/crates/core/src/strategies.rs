//! Placement cost and the comparator strategies: oracle (exact search at desk
//! scale, tree DP / greedy beyond), sharded oracle, round-robin and three
//! heuristics.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::dag::{topo_order, PipelineTemplate};
use crate::federation::GovernancePolicy;
use crate::market::{worker_cost, RejectReason};
use crate::topology::{DomainId, LatencyModel, Site, StageId, Topology, WorkerId, WorkerSpec};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostWeights {
    pub alpha: f64,
    pub beta: f64,
    pub zeta: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        CostWeights { alpha: 1.0, beta: 1.0, zeta: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SnapshotWorker {
    pub spec: WorkerSpec,
    pub load: f64,
}

/// What a placer knows: the live workers it may use with their loads, the
/// site of every domain, and the pipeline's origin (if the ingress hop from
/// the publisher is to be costed).
#[derive(Clone, Debug, PartialEq)]
pub struct TopologySnapshot {
    pub workers: Vec<SnapshotWorker>,
    pub sites: Vec<Site>,
    pub latency: LatencyModel,
    pub origin: Option<DomainId>,
}

impl TopologySnapshot {
    /// All workers of `topo` accepted by `include`, with `loads[worker_id]`.
    pub fn from_topology(
        topo: &Topology,
        loads: &[f64],
        include: impl Fn(WorkerId) -> bool,
        origin: Option<DomainId>,
    ) -> TopologySnapshot {
        TopologySnapshot {
            workers: topo
                .workers
                .iter()
                .filter(|w| include(w.worker_id))
                .map(|w| SnapshotWorker { spec: w.clone(), load: loads[w.worker_id] })
                .collect(),
            sites: topo.domains.iter().map(|d| d.site).collect(),
            latency: topo.latency.clone(),
            origin,
        }
    }

    fn site(&self, i: usize) -> Site {
        self.sites[self.workers[i].spec.domain]
    }

    /// Expected latency between snapshot positions i and j.
    pub fn link(&self, i: usize, j: usize) -> f64 {
        if self.workers[i].spec.worker_id == self.workers[j].spec.worker_id {
            0.0
        } else if self.site(i) == self.site(j) {
            self.latency.lan_ms
        } else {
            self.latency.wan_ms
        }
    }

    /// Expected latency from the origin publisher to position i (0 without origin).
    pub fn ingress(&self, i: usize) -> f64 {
        match self.origin {
            None => 0.0,
            Some(o) if self.sites[o] == self.site(i) => self.latency.lan_ms,
            Some(_) => self.latency.wan_ms,
        }
    }

    pub fn position(&self, w: WorkerId) -> Option<usize> {
        self.workers.iter().position(|x| x.spec.worker_id == w)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlacementDecision {
    /// Worker per stage id (empty when rejected).
    pub assignment: Vec<WorkerId>,
    pub total_cost: f64,
    /// Distinct domains touched minus one.
    pub domains_crossed: usize,
    pub accepted: bool,
    pub reject_reason: Option<RejectReason>,
}

impl PlacementDecision {
    pub fn rejected(reason: RejectReason) -> PlacementDecision {
        PlacementDecision {
            assignment: Vec::new(),
            total_cost: f64::NAN,
            domains_crossed: 0,
            accepted: false,
            reject_reason: Some(reason),
        }
    }

    fn accepted(
        assignment: Vec<WorkerId>,
        pipeline: &PipelineTemplate,
        snap: &TopologySnapshot,
        w: &CostWeights,
    ) -> Self {
        let total_cost = placement_cost(&assignment, pipeline, snap, w);
        let domains_crossed = domains_touched(&assignment, snap).saturating_sub(1);
        PlacementDecision { assignment, total_cost, domains_crossed, accepted: true, reject_reason: None }
    }
}

fn domains_touched(assignment: &[WorkerId], snap: &TopologySnapshot) -> usize {
    let set: BTreeSet<DomainId> = assignment
        .iter()
        .map(|w| snap.workers[snap.position(*w).expect("assigned worker in snapshot")].spec.domain)
        .collect();
    set.len()
}

/// Weighted placement cost: alpha * (inter-stage latency plus origin ingress when
/// the snapshot has an origin) + beta * utilisation + zeta * domains touched.
/// Utilisation of a stage counts the worker's load plus the demand of stages
/// placed on it earlier in topological order.
pub fn placement_cost(
    assignment: &[WorkerId],
    pipeline: &PipelineTemplate,
    snap: &TopologySnapshot,
    weights: &CostWeights,
) -> f64 {
    let pos: Vec<usize> = assignment.iter().map(|w| snap.position(*w).expect("assigned worker in snapshot")).collect();
    let mut latency = 0.0;
    for e in &pipeline.edges {
        latency += snap.link(pos[e.from], pos[e.to]);
    }
    for v in 0..pipeline.len() {
        if pipeline.is_source(v) {
            latency += snap.ingress(pos[v]);
        }
    }
    let mut assigned: BTreeMap<usize, f64> = BTreeMap::new();
    let mut util = 0.0;
    for v in topo_order(pipeline).expect("validated template") {
        let i = pos[v];
        let before = assigned.get(&i).copied().unwrap_or(0.0);
        let w = &snap.workers[i];
        util += (w.load + before + pipeline.stages[v].demand) / w.spec.capacity;
        assigned.insert(i, before + pipeline.stages[v].demand);
    }
    weights.alpha * latency + weights.beta * util + weights.zeta * domains_touched(assignment, snap) as f64
}

/// Positions each stage may use ignoring capacity: slice and sovereignty filters.
fn candidates(pipeline: &PipelineTemplate, snap: &TopologySnapshot, gov: &GovernancePolicy) -> Vec<Vec<usize>> {
    pipeline
        .stages
        .iter()
        .map(|s| {
            let pinned = snap.origin.is_some_and(|o| gov.pinned(s, o));
            (0..snap.workers.len())
                .filter(|&i| {
                    let w = &snap.workers[i].spec;
                    w.slice.hosts(s.slice) && (!pinned || Some(w.domain) == snap.origin)
                })
                .collect()
        })
        .collect()
}

/// Placement spaces up to this size are searched exactly.
pub const EXACT_SEARCH_LIMIT: f64 = 250_000.0;

/// Oracle placement with full visibility. Small instances are solved by
/// exhaustive branch and bound; larger ones evaluate every domain subset with
/// a tree DP (out-tree pipelines) and a greedy topological pass, then polish
/// the cheapest capacity-feasible result by local search.
pub fn oracle_place(
    pipeline: &PipelineTemplate,
    snap: &TopologySnapshot,
    weights: &CostWeights,
    gov: &GovernancePolicy,
) -> PlacementDecision {
    let cand = candidates(pipeline, snap, gov);
    if cand.iter().any(|c| c.is_empty()) {
        return PlacementDecision::rejected(RejectReason::Infeasible);
    }
    let space: f64 = cand.iter().map(|c| c.len() as f64).product();
    let best = if space <= EXACT_SEARCH_LIMIT {
        exact_search(pipeline, snap, weights, &cand)
    } else {
        oracle_heuristic(pipeline, snap, weights, gov)
    };
    match best {
        Some(a) => PlacementDecision::accepted(a, pipeline, snap, weights),
        None => PlacementDecision::rejected(RejectReason::Infeasible),
    }
}

struct Search<'a> {
    pipeline: &'a PipelineTemplate,
    snap: &'a TopologySnapshot,
    w: &'a CostWeights,
    cand: &'a [Vec<usize>],
    order: Vec<StageId>,
    pos: Vec<usize>,
    used: Vec<f64>,
    domains: Vec<usize>,
    best: f64,
    best_pos: Option<Vec<usize>>,
}

impl Search<'_> {
    fn incremental(&self, v: StageId, i: usize) -> f64 {
        let mut lat = 0.0;
        for p in self.pipeline.preds(v) {
            lat += self.snap.link(self.pos[p], i);
        }
        if self.pipeline.is_source(v) {
            lat += self.snap.ingress(i);
        }
        let w = &self.snap.workers[i];
        let util = (w.load + self.used[i] + self.pipeline.stages[v].demand) / w.spec.capacity;
        let new_domain = if self.domains[w.spec.domain] == 0 { 1.0 } else { 0.0 };
        self.w.alpha * lat + self.w.beta * util + self.w.zeta * new_domain
    }

    fn fits(&self, v: StageId, i: usize) -> bool {
        let w = &self.snap.workers[i];
        w.load + self.used[i] + self.pipeline.stages[v].demand <= w.spec.capacity + 1e-9
    }

    fn dfs(&mut self, k: usize, cost: f64) {
        if cost >= self.best - 1e-12 {
            return;
        }
        if k == self.order.len() {
            self.best = cost;
            self.best_pos = Some(self.pos.clone());
            return;
        }
        let v = self.order[k];
        for &i in &self.cand[v] {
            if !self.fits(v, i) {
                continue;
            }
            let inc = self.incremental(v, i);
            let d = self.snap.workers[i].spec.domain;
            self.pos[v] = i;
            self.used[i] += self.pipeline.stages[v].demand;
            self.domains[d] += 1;
            self.dfs(k + 1, cost + inc);
            self.domains[d] -= 1;
            self.used[i] -= self.pipeline.stages[v].demand;
        }
    }
}

fn exact_search(
    pipeline: &PipelineTemplate,
    snap: &TopologySnapshot,
    w: &CostWeights,
    cand: &[Vec<usize>],
) -> Option<Vec<WorkerId>> {
    let mut s = Search {
        pipeline,
        snap,
        w,
        cand,
        order: topo_order(pipeline).ok()?,
        pos: vec![usize::MAX; pipeline.len()],
        used: vec![0.0; snap.workers.len()],
        domains: vec![0; snap.sites.len()],
        best: f64::INFINITY,
        best_pos: None,
    };
    s.dfs(0, 0.0);
    s.best_pos.map(|p| p.iter().map(|&i| snap.workers[i].spec.worker_id).collect())
}

/// The scalable oracle path, also used directly where exact search is too large.
pub fn oracle_heuristic(
    pipeline: &PipelineTemplate,
    snap: &TopologySnapshot,
    weights: &CostWeights,
    gov: &GovernancePolicy,
) -> Option<Vec<WorkerId>> {
    let cand = candidates(pipeline, snap, gov);
    let order = topo_order(pipeline).ok()?;
    let out_tree = pipeline.digraph().in_degrees().iter().all(|&d| d <= 1);
    let present: BTreeSet<DomainId> = snap.workers.iter().map(|w| w.spec.domain).collect();
    let present: Vec<DomainId> = present.into_iter().collect();
    let mut best: Option<(f64, Vec<WorkerId>)> = None;
    for mask in 1u32..(1u32 << present.len()) {
        let allowed: Vec<Vec<usize>> = cand
            .iter()
            .map(|c| {
                c.iter()
                    .copied()
                    .filter(|&i| {
                        let d = snap.workers[i].spec.domain;
                        let bit = present.iter().position(|&x| x == d).expect("present domain");
                        mask >> bit & 1 == 1
                    })
                    .collect()
            })
            .collect();
        if allowed.iter().any(|c: &Vec<usize>| c.is_empty()) {
            continue;
        }
        let mut attempts = Vec::new();
        if out_tree {
            if let Some(p) = tree_dp(pipeline, snap, weights, &allowed, &order) {
                attempts.push(p);
            }
        }
        if let Some(p) = greedy(pipeline, snap, weights, &allowed, &order, None) {
            attempts.push(p);
        }
        for pos in attempts {
            let a: Vec<WorkerId> = pos.iter().map(|&i| snap.workers[i].spec.worker_id).collect();
            let c = placement_cost(&a, pipeline, snap, weights);
            if best.as_ref().is_none_or(|(b, _)| c < *b - 1e-12) {
                best = Some((c, a));
            }
        }
    }
    best.map(|(cost, a)| improve(pipeline, snap, weights, &cand, a, cost))
}

/// Best-improvement local search over single-stage moves and pairwise swaps,
/// keeping capacity and candidate filters.
fn improve(
    pipeline: &PipelineTemplate,
    snap: &TopologySnapshot,
    weights: &CostWeights,
    cand: &[Vec<usize>],
    mut a: Vec<WorkerId>,
    mut cost: f64,
) -> Vec<WorkerId> {
    let n = pipeline.len();
    let mut pos: Vec<usize> = a.iter().map(|w| snap.position(*w).expect("assigned worker")).collect();
    let fits = |pos: &[usize]| {
        let mut used = vec![0.0; snap.workers.len()];
        for (v, &i) in pos.iter().enumerate() {
            used[i] += pipeline.stages[v].demand;
        }
        used.iter()
            .enumerate()
            .all(|(i, u)| *u == 0.0 || snap.workers[i].load + u <= snap.workers[i].spec.capacity + 1e-9)
    };
    let eval = |pos: &[usize]| -> f64 {
        let a: Vec<WorkerId> = pos.iter().map(|&i| snap.workers[i].spec.worker_id).collect();
        placement_cost(&a, pipeline, snap, weights)
    };
    loop {
        let mut best: Option<(f64, Vec<usize>)> = None;
        let consider = |trial: Vec<usize>, best: &mut Option<(f64, Vec<usize>)>| {
            if !fits(&trial) {
                return;
            }
            let c = eval(&trial);
            if c < cost - 1e-9 && best.as_ref().is_none_or(|(b, _)| c < *b - 1e-12) {
                *best = Some((c, trial));
            }
        };
        for v in 0..n {
            for &i in &cand[v] {
                if i != pos[v] {
                    let mut trial = pos.clone();
                    trial[v] = i;
                    consider(trial, &mut best);
                }
            }
        }
        for u in 0..n {
            for v in u + 1..n {
                if pos[u] != pos[v] && cand[u].contains(&pos[v]) && cand[v].contains(&pos[u]) {
                    let mut trial = pos.clone();
                    trial.swap(u, v);
                    consider(trial, &mut best);
                }
            }
        }
        match best {
            Some((c, trial)) => {
                cost = c;
                pos = trial;
            }
            None => break,
        }
    }
    a.clear();
    a.extend(pos.iter().map(|&i| snap.workers[i].spec.worker_id));
    a
}

/// Greedy topological assignment minimising incremental cost, respecting
/// capacity. `hint` gives a preferred position per stage, kept when it fits.
fn greedy(
    pipeline: &PipelineTemplate,
    snap: &TopologySnapshot,
    w: &CostWeights,
    allowed: &[Vec<usize>],
    order: &[StageId],
    hint: Option<&[usize]>,
) -> Option<Vec<usize>> {
    let mut s = Search {
        pipeline,
        snap,
        w,
        cand: allowed,
        order: order.to_vec(),
        pos: vec![usize::MAX; pipeline.len()],
        used: vec![0.0; snap.workers.len()],
        domains: vec![0; snap.sites.len()],
        best: f64::INFINITY,
        best_pos: None,
    };
    for &v in order {
        let keep = hint.map(|h| h[v]).filter(|&i| s.fits(v, i));
        let pick = keep.or_else(|| {
            allowed[v]
                .iter()
                .copied()
                .filter(|&i| s.fits(v, i))
                .map(|i| (s.incremental(v, i), snap.workers[i].spec.worker_id, i))
                .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
                .map(|x| x.2)
        })?;
        s.pos[v] = pick;
        s.used[pick] += pipeline.stages[v].demand;
        s.domains[snap.workers[pick].spec.domain] += 1;
    }
    Some(s.pos)
}

/// Bottom-up DP over an out-tree pipeline with snapshot-load utilisation,
/// followed by greedy capacity repair in topological order.
fn tree_dp(
    pipeline: &PipelineTemplate,
    snap: &TopologySnapshot,
    w: &CostWeights,
    allowed: &[Vec<usize>],
    order: &[StageId],
) -> Option<Vec<usize>> {
    let n = snap.workers.len();
    let mut dp = vec![vec![f64::INFINITY; n]; pipeline.len()];
    let mut choice: Vec<Vec<Vec<(StageId, usize)>>> = vec![vec![Vec::new(); n]; pipeline.len()];
    for &v in order.iter().rev() {
        let children: Vec<StageId> = pipeline.succs(v).collect();
        for &i in &allowed[v] {
            let ws = &snap.workers[i];
            let mut cost = w.beta * (ws.load + pipeline.stages[v].demand) / ws.spec.capacity;
            if pipeline.is_source(v) {
                cost += w.alpha * snap.ingress(i);
            }
            let mut picks = Vec::new();
            for &c in &children {
                let (best_j, best_c) = allowed[c]
                    .iter()
                    .map(|&j| (j, dp[c][j] + w.alpha * snap.link(i, j)))
                    .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))?;
                cost += best_c;
                picks.push((c, best_j));
            }
            dp[v][i] = cost;
            choice[v][i] = picks;
        }
    }
    let mut pos = vec![usize::MAX; pipeline.len()];
    for &v in order {
        if pipeline.is_source(v) {
            pos[v] = allowed[v].iter().copied().min_by(|&a, &b| dp[v][a].total_cmp(&dp[v][b]).then(a.cmp(&b)))?;
        }
        let i = pos[v];
        for &(c, j) in &choice[v][i] {
            pos[c] = j;
        }
    }
    greedy(pipeline, snap, w, allowed, order, Some(&pos))
}

/// Round-robin: each stage takes the next slice-feasible worker after the
/// cursor, with no cost or load consideration.
pub fn rr_place(
    pipeline: &PipelineTemplate,
    snap: &TopologySnapshot,
    cursor: &mut usize,
    gov: &GovernancePolicy,
) -> PlacementDecision {
    let n = snap.workers.len();
    let cand = candidates(pipeline, snap, gov);
    let Ok(order) = topo_order(pipeline) else {
        return PlacementDecision::rejected(RejectReason::Infeasible);
    };
    let mut pos = vec![0; pipeline.len()];
    let mut c = *cursor % n.max(1);
    for v in order {
        let Some(i) = (0..n).map(|k| (c + k) % n).find(|i| cand[v].contains(i)) else {
            return PlacementDecision::rejected(RejectReason::Infeasible);
        };
        pos[v] = i;
        c = (i + 1) % n;
    }
    *cursor = c;
    let a = pos.iter().map(|&i| snap.workers[i].spec.worker_id).collect();
    PlacementDecision::accepted(a, pipeline, snap, &CostWeights::default())
}

/// Shared per-stage loop for the heuristics: `pick` chooses a position among
/// capacity-feasible candidates given the positions placed so far.
fn place_stagewise(
    pipeline: &PipelineTemplate,
    snap: &TopologySnapshot,
    gov: &GovernancePolicy,
    mut pick: impl FnMut(StageId, &[usize], &[usize], &[f64]) -> Option<usize>,
) -> PlacementDecision {
    let cand = candidates(pipeline, snap, gov);
    let Ok(order) = topo_order(pipeline) else {
        return PlacementDecision::rejected(RejectReason::Infeasible);
    };
    let mut pos = vec![usize::MAX; pipeline.len()];
    let mut used = vec![0.0; snap.workers.len()];
    for v in order {
        let demand = pipeline.stages[v].demand;
        let fitting: Vec<usize> = cand[v]
            .iter()
            .copied()
            .filter(|&i| snap.workers[i].load + used[i] + demand <= snap.workers[i].spec.capacity + 1e-9)
            .collect();
        let Some(i) = pick(v, &fitting, &pos, &used) else {
            return PlacementDecision::rejected(RejectReason::Infeasible);
        };
        pos[v] = i;
        used[i] += demand;
    }
    let a = pos.iter().map(|&i| snap.workers[i].spec.worker_id).collect();
    PlacementDecision::accepted(a, pipeline, snap, &CostWeights::default())
}

/// Cheapest slice-feasible worker with room in the origin domain only.
pub fn locality_place(
    pipeline: &PipelineTemplate,
    snap: &TopologySnapshot,
    gov: &GovernancePolicy,
) -> PlacementDecision {
    let Some(origin) = snap.origin else {
        return PlacementDecision::rejected(RejectReason::Infeasible);
    };
    place_stagewise(pipeline, snap, gov, |_, fitting, _, used| {
        fitting
            .iter()
            .copied()
            .filter(|&i| snap.workers[i].spec.domain == origin)
            .map(|i| {
                let w = &snap.workers[i];
                let bid = w.spec.base_bid * w.spec.speed;
                (worker_cost(bid, w.load + used[i], w.spec.capacity), w.spec.worker_id, i)
            })
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
            .map(|x| x.2)
    })
}

/// Per stage, the worker with room closest to the stage's inputs; load only
/// breaks ties.
pub fn latency_greedy_place(
    pipeline: &PipelineTemplate,
    snap: &TopologySnapshot,
    gov: &GovernancePolicy,
) -> PlacementDecision {
    place_stagewise(pipeline, snap, gov, |v, fitting, pos, used| {
        fitting
            .iter()
            .copied()
            .map(|i| {
                let mut lat: f64 = pipeline.preds(v).map(|p| snap.link(pos[p], i)).sum();
                if pipeline.is_source(v) {
                    lat += snap.ingress(i);
                }
                (lat, snap.workers[i].load + used[i], snap.workers[i].spec.worker_id, i)
            })
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)).then(a.2.cmp(&b.2)))
            .map(|x| x.3)
    })
}

/// Least-loaded origin worker with room; once the origin cannot take a stage,
/// the nearest peer domain (by link latency, then id) that can.
pub fn spillover_place(
    pipeline: &PipelineTemplate,
    snap: &TopologySnapshot,
    gov: &GovernancePolicy,
) -> PlacementDecision {
    let Some(origin) = snap.origin else {
        return PlacementDecision::rejected(RejectReason::Infeasible);
    };
    let distance = |d: DomainId| -> (u8, DomainId) {
        if d == origin {
            (0, d)
        } else if snap.sites[d] == snap.sites[origin] {
            (1, d)
        } else {
            (2, d)
        }
    };
    place_stagewise(pipeline, snap, gov, |_, fitting, _, used| {
        fitting
            .iter()
            .copied()
            .map(|i| {
                let w = &snap.workers[i];
                (distance(w.spec.domain), w.load + used[i], w.spec.worker_id, i)
            })
            .min_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)).then(a.2.cmp(&b.2)))
            .map(|x| x.3)
    })
}

/// Worker state of one peer domain as pulled by the sharded coordinator.
#[derive(Clone, Debug, PartialEq)]
pub struct PeerSnapshot {
    pub domain: DomainId,
    pub workers: Vec<SnapshotWorker>,
    pub timed_out: bool,
}

/// Merge the coordinator's own view with the pulled peer snapshots (timed-out
/// peers excluded) and run the oracle on the result.
pub fn sharded_oracle_place(
    pipeline: &PipelineTemplate,
    coordinator: &TopologySnapshot,
    pulled: &[PeerSnapshot],
    weights: &CostWeights,
    gov: &GovernancePolicy,
) -> PlacementDecision {
    oracle_place(pipeline, &merge_snapshots(coordinator, pulled), weights, gov)
}

pub fn merge_snapshots(coordinator: &TopologySnapshot, pulled: &[PeerSnapshot]) -> TopologySnapshot {
    let mut merged = coordinator.clone();
    for p in pulled.iter().filter(|p| !p.timed_out) {
        merged.workers.extend(p.workers.iter().cloned());
    }
    merged.workers.sort_by_key(|w| w.spec.worker_id);
    merged.workers.dedup_by_key(|w| w.spec.worker_id);
    merged
}
