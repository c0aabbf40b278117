//! Bids, congestion pricing, clearing prices, the trade rule, the reservation
//! ledger and market placement of whole pipelines.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::dag::{topo_order, PipelineTemplate, StageSpec};
use crate::federation::GovernancePolicy;
use crate::topology::{DomainId, Slice, WorkerId};

pub use crate::topology::WorkerSpec;

pub const UTILISATION_CAP: f64 = 0.99;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkerLoadView {
    pub worker_id: WorkerId,
    pub load: f64,
    pub observed_at: f64,
}

pub fn speed_scaled_bid(base_bid: f64, speed: f64) -> f64 {
    base_bid * speed
}

/// M/M/1 congestion cost: bid / (1 - rho), rho = min(load / capacity, 0.99).
pub fn worker_cost(bid: f64, load: f64, capacity: f64) -> f64 {
    worker_cost_capped(bid, load, capacity, UTILISATION_CAP)
}

pub fn worker_cost_capped(bid: f64, load: f64, capacity: f64, cap: f64) -> f64 {
    let rho = (load / capacity).min(cap);
    bid / (1.0 - rho)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkerBid {
    pub worker_id: WorkerId,
    pub stage_type: String,
    pub bid: f64,
    pub cost: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClearingPriceTable {
    pub prices: BTreeMap<String, f64>,
    pub demand_used: BTreeMap<String, usize>,
    /// Worker whose cost set each price.
    pub marginal_worker: BTreeMap<String, WorkerId>,
    pub computed_at: f64,
}

impl ClearingPriceTable {
    pub fn price(&self, stage_type: &str) -> f64 {
        self.prices.get(stage_type).copied().unwrap_or(f64::INFINITY)
    }
}

/// Price of type t is the d_t-th cheapest bid cost, d_t = min(demand, supply)
/// and at least 1. Demanded types without any bid price at infinity.
pub fn clearing_prices(bids: &[WorkerBid], demand: &BTreeMap<String, usize>, now: f64) -> ClearingPriceTable {
    let mut by_type: BTreeMap<&str, Vec<(f64, WorkerId)>> = BTreeMap::new();
    for b in bids {
        by_type.entry(b.stage_type.as_str()).or_default().push((b.cost, b.worker_id));
    }
    let mut table = ClearingPriceTable { computed_at: now, ..Default::default() };
    for (ty, mut costs) in by_type {
        costs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let want = demand.get(ty).copied().unwrap_or(0);
        let d = want.min(costs.len()).max(1);
        let (price, worker) = costs[d - 1];
        table.prices.insert(ty.to_string(), price);
        table.demand_used.insert(ty.to_string(), d);
        table.marginal_worker.insert(ty.to_string(), worker);
    }
    for (ty, &want) in demand {
        if want > 0 && !table.prices.contains_key(ty) {
            table.prices.insert(ty.clone(), f64::INFINITY);
            table.demand_used.insert(ty.clone(), 0);
        }
    }
    table
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriceSignalMsg {
    pub origin_domain: DomainId,
    pub prices: BTreeMap<String, f64>,
    pub issued_at: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TradeChoice {
    Local,
    Remote(DomainId),
}

/// Go remote only when some peer's price plus the WAN cost strictly beats
/// the local price; the cheapest such peer wins, ties by domain id.
pub fn trade_decision(stage_type: &str, local_price: f64, peers: &[PriceSignalMsg], wan_cost: f64) -> TradeChoice {
    match best_peer(stage_type, peers, wan_cost) {
        Some((d, total)) if total < local_price => TradeChoice::Remote(d),
        _ => TradeChoice::Local,
    }
}

fn best_peer(stage_type: &str, peers: &[PriceSignalMsg], wan_cost: f64) -> Option<(DomainId, f64)> {
    peers
        .iter()
        .filter_map(|p| {
            let price = *p.prices.get(stage_type)?;
            price.is_finite().then_some((p.origin_domain, price + wan_cost))
        })
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReservationLedger {
    pub additions: BTreeMap<WorkerId, f64>,
}

impl ReservationLedger {
    pub fn get(&self, w: WorkerId) -> f64 {
        self.additions.get(&w).copied().unwrap_or(0.0)
    }

    pub fn add(&mut self, w: WorkerId, demand: f64) {
        *self.additions.entry(w).or_insert(0.0) += demand;
    }

    /// Hands the round's additions to the caller and clears the ledger.
    pub fn commit(&mut self) -> BTreeMap<WorkerId, f64> {
        std::mem::take(&mut self.additions)
    }
}

const RESERVE_TOL: f64 = 1e-9;

/// Accept iff demand <= capacity - load - l_add(worker); accepted demand is added.
pub fn reserve(ledger: &mut ReservationLedger, worker: &WorkerSpec, view: &WorkerLoadView, demand: f64) -> bool {
    if demand <= worker.capacity - view.load - ledger.get(worker.worker_id) + RESERVE_TOL {
        ledger.add(worker.worker_id, demand);
        true
    } else {
        false
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarketConfig {
    pub wan_cost: f64,
    pub utilisation_cap: f64,
    pub budget_multiplier: f64,
}

impl Default for MarketConfig {
    fn default() -> Self {
        MarketConfig { wan_cost: 30.0, utilisation_cap: UTILISATION_CAP, budget_multiplier: 10.0 }
    }
}

impl MarketConfig {
    pub fn validate(&self) -> crate::Result<()> {
        if !(self.wan_cost >= 0.0) || !(self.utilisation_cap > 0.0 && self.utilisation_cap < 1.0) {
            return Err(crate::Error::Config("wan_cost >= 0 and utilisation_cap in (0,1) required".into()));
        }
        if !(self.budget_multiplier > 0.0) {
            return Err(crate::Error::Config("budget_multiplier must be positive".into()));
        }
        Ok(())
    }

    /// Budget for a pipeline of `stages` stages at base bid `b0`.
    pub fn value_budget(&self, stages: usize, b0: f64) -> f64 {
        stages as f64 * self.budget_multiplier * b0
    }
}

/// A worker as seen by its own broker.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalWorker {
    pub spec: WorkerSpec,
    pub view: WorkerLoadView,
}

impl LocalWorker {
    pub fn bid(&self) -> f64 {
        speed_scaled_bid(self.spec.base_bid, self.spec.speed)
    }
}

/// Bids of every eligible worker for each listed stage type, priced at the
/// worker's load plus any within-round reservation.
pub fn local_bids(
    workers: &[LocalWorker],
    types: &[(String, Slice)],
    ledger: &ReservationLedger,
    cap: f64,
) -> Vec<WorkerBid> {
    let mut bids = Vec::new();
    for (ty, slice) in types {
        for w in workers.iter().filter(|w| w.spec.slice.hosts(*slice)) {
            let load = w.view.load + ledger.get(w.spec.worker_id);
            bids.push(WorkerBid {
                worker_id: w.spec.worker_id,
                stage_type: ty.clone(),
                bid: w.bid(),
                cost: worker_cost_capped(w.bid(), load, w.spec.capacity, cap),
            });
        }
    }
    bids
}

/// Cheapest slice-feasible worker that can still take `stage`, with its cost
/// at the current load including this round's reservations. Ties by id.
pub fn cheapest_reservable(
    workers: &[LocalWorker],
    stage: &StageSpec,
    ledger: &ReservationLedger,
    cap: f64,
) -> Option<(WorkerId, f64)> {
    workers
        .iter()
        .filter(|w| w.spec.slice.hosts(stage.slice))
        .filter(|w| stage.demand <= w.spec.capacity - w.view.load - ledger.get(w.spec.worker_id) + RESERVE_TOL)
        .map(|w| {
            let load = w.view.load + ledger.get(w.spec.worker_id);
            (w.spec.worker_id, worker_cost_capped(w.bid(), load, w.spec.capacity, cap))
        })
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RejectReason {
    Infeasible,
    OverBudget,
    Unreachable,
    TimedOut,
    WorkerLost,
}

impl RejectReason {
    pub fn label(self) -> &'static str {
        match self {
            RejectReason::Infeasible => "infeasible",
            RejectReason::OverBudget => "over-budget",
            RejectReason::Unreachable => "unreachable",
            RejectReason::TimedOut => "timed-out",
            RejectReason::WorkerLost => "worker-lost",
        }
    }
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum StagePlacement {
    Local {
        worker: WorkerId,
        cost: f64,
    },
    /// Quoted price including the WAN cost; the peer broker picks the worker.
    Remote {
        domain: DomainId,
        price: f64,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct MarketPlan {
    pub stages: Vec<StagePlacement>,
    pub total_cost: f64,
    pub prices: ClearingPriceTable,
}

/// Distinct (type, slice) pairs of a pipeline.
pub fn pipeline_types(p: &PipelineTemplate) -> Vec<(String, Slice)> {
    let set: BTreeSet<(String, Slice)> = p.stages.iter().map(|s| (s.stage_type.clone(), s.slice)).collect();
    set.into_iter().collect()
}

/// Stage-type counts of one pipeline, the per-epoch demand estimate.
pub fn pipeline_demand(p: &PipelineTemplate) -> BTreeMap<String, usize> {
    let mut d = BTreeMap::new();
    for s in &p.stages {
        *d.entry(s.stage_type.clone()).or_insert(0) += 1;
    }
    d
}

/// Market placement of one pipeline at its origin broker.
///
/// `local` holds the origin's live workers, `peers` the healthy, fresh peer
/// signals and `demand` the epoch's stage-type demand. On success the
/// reservations of local stages are added to `ledger`; on rejection the
/// ledger is left untouched.
#[allow(clippy::too_many_arguments)]
pub fn market_place(
    pipeline: &PipelineTemplate,
    origin: DomainId,
    local: &[LocalWorker],
    peers: &[PriceSignalMsg],
    config: &MarketConfig,
    gov: &GovernancePolicy,
    ledger: &mut ReservationLedger,
    demand: &BTreeMap<String, usize>,
    now: f64,
) -> Result<MarketPlan, RejectReason> {
    let cap = config.utilisation_cap;
    let bids = local_bids(local, &pipeline_types(pipeline), ledger, cap);
    let prices = clearing_prices(&bids, demand, now);
    let order = topo_order(pipeline).map_err(|_| RejectReason::Infeasible)?;
    let mut scratch = ledger.clone();
    let mut stages = vec![StagePlacement::Remote { domain: origin, price: f64::NAN }; pipeline.len()];
    let mut total = 0.0;
    for v in order {
        let stage = &pipeline.stages[v];
        let pinned = gov.pinned(stage, origin);
        let eligible: &[PriceSignalMsg] = if pinned { &[] } else { peers };
        let local_price = prices.price(&stage.stage_type);
        let choice = trade_decision(&stage.stage_type, local_price, eligible, config.wan_cost);
        let placed = match choice {
            TradeChoice::Local => match cheapest_reservable(local, stage, &scratch, cap) {
                Some((w, cost)) => {
                    scratch.add(w, stage.demand);
                    StagePlacement::Local { worker: w, cost }
                }
                None => match best_peer(&stage.stage_type, eligible, config.wan_cost) {
                    Some((d, price)) => StagePlacement::Remote { domain: d, price },
                    None => return Err(RejectReason::Infeasible),
                },
            },
            TradeChoice::Remote(d) => {
                let price = eligible.iter().find(|p| p.origin_domain == d).map(|p| p.prices[&stage.stage_type]);
                StagePlacement::Remote { domain: d, price: price.unwrap_or(f64::INFINITY) + config.wan_cost }
            }
        };
        total += match &placed {
            StagePlacement::Local { cost, .. } => *cost,
            StagePlacement::Remote { price, .. } => *price,
        };
        stages[v] = placed;
    }
    if total > pipeline.value_budget {
        return Err(RejectReason::OverBudget);
    }
    *ledger = scratch;
    Ok(MarketPlan { stages, total_cost: total, prices })
}
