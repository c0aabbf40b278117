use std::collections::{BTreeMap, BTreeSet};

use fedplace_core::dag::{build_template, stage_type_registry, PipelineKind, PipelineTemplate, Sovereignty, StageSpec};
use fedplace_core::federation::*;
use fedplace_core::market::{
    cheapest_reservable, LocalWorker, MarketConfig, PriceSignalMsg, RejectReason, ReservationLedger, WorkerLoadView,
};
use fedplace_core::topology::{DomainId, Site, Slice, Topology, WorkerId, WorkerSpec};

fn msg(domain: usize, at: f64) -> PriceSignalMsg {
    PriceSignalMsg { origin_domain: domain, prices: BTreeMap::from([("t".to_string(), 10.0)]), issued_at: at }
}

fn summary_for(domain: usize, ty: &str, radius: f64, capacity: f64) -> SubscriptionSummary {
    SubscriptionSummary {
        origin_domain: domain,
        clusters: vec![SummaryCluster { centroid: content_vector(ty), radius, capacity }],
    }
}

#[test]
fn staleness_bound_and_history_capacity() {
    let c = FederationConfig::default();
    assert!((c.staleness_bound() - 10_050.0).abs() < 1e-9);
    assert_eq!(c.history_capacity(), 3);
    c.validate().unwrap();
    assert!(FederationConfig { k_miss: 0, ..c.clone() }.validate().is_err());
    assert!(FederationConfig { tau_fed_ms: f64::NAN, ..c }.validate().is_err());
}

#[test]
fn push_results_drive_health() {
    let mut v = PeerView::new(2);
    v.receive(msg(2, 0.0), summary_for(2, "t", 0.0, 1.0), 0.0, 3);
    on_price_push_result(&mut v, false, 3);
    on_price_push_result(&mut v, false, 3);
    on_price_push_result(&mut v, true, 3);
    assert!(v.healthy);
    assert_eq!(v.consecutive_misses, 0);
    assert!(v.last_price.is_some());

    for _ in 0..3 {
        on_price_push_result(&mut v, false, 3);
    }
    assert!(!v.healthy);
    assert!(v.last_price.is_none() && v.last_summary.is_none());
    assert!(v.fresh_price(0.0, 1e9).is_none());
}

#[test]
fn prices_older_than_bound_are_ignored() {
    let b = FederationConfig::default().staleness_bound();
    let mut v = PeerView::new(1);
    v.receive(msg(1, 0.0), summary_for(1, "t", 0.0, 1.0), 50.0, 3);
    assert!(v.fresh_price(b, b).is_some());
    assert!(v.fresh_price(b + 1.0, b).is_none());
}

#[test]
fn price_history_is_bounded() {
    let mut v = PeerView::new(1);
    for k in 0..10 {
        v.receive(msg(1, k as f64 * 10_000.0), summary_for(1, "t", 0.0, 1.0), k as f64 * 10_000.0, 3);
    }
    assert_eq!(v.price_history.len(), 3);
    assert_eq!(v.price_history.front().unwrap().0, 70_000.0);
}

fn broker(domain: usize) -> BrokerState {
    let topo = Topology::default_federation();
    BrokerState::new(domain, &topo, GovernancePolicy::none())
}

#[test]
fn routing_ranks_matching_peer_first_and_filters() {
    let mut b = broker(0);
    let content = content_vector("RIC:predict");
    b.peers.get_mut(&1).unwrap().receive(msg(1, 0.0), summary_for(1, "RIC:predict", 1.0, 2.0), 0.0, 3);
    b.peers.get_mut(&2).unwrap().receive(msg(2, 0.0), summary_for(2, "SMO:report", 0.0, 2.0), 0.0, 3);
    assert_eq!(route_publication(&b, &content, 0.0, DEFAULT_MATCH_THRESHOLD), vec![1]);

    // trust below the requirement excludes the peer
    b.governance.trust.insert(1, 0.2);
    assert!(route_publication(&b, &content, 0.5, DEFAULT_MATCH_THRESHOLD).is_empty());
    b.governance.trust.insert(1, 1.0);

    // zero capacity excludes the peer
    b.peers.get_mut(&1).unwrap().last_summary = Some(summary_for(1, "RIC:predict", 1.0, 0.0));
    assert!(route_publication(&b, &content, 0.0, DEFAULT_MATCH_THRESHOLD).is_empty());

    // all peers unhealthy
    let mut b = broker(0);
    for v in b.peers.values_mut() {
        v.receive(msg(v.peer_domain, 0.0), summary_for(v.peer_domain, "RIC:predict", 0.0, 1.0), 0.0, 3);
        for _ in 0..3 {
            on_price_push_result(v, false, 3);
        }
    }
    assert!(route_publication(&b, &content, 0.0, DEFAULT_MATCH_THRESHOLD).is_empty());
}

#[test]
fn content_vectors_are_unit_and_distinct() {
    let reg = stage_type_registry();
    let vs: Vec<Vec<f64>> = reg.iter().map(|(t, _)| content_vector(t)).collect();
    for (i, v) in vs.iter().enumerate() {
        assert_eq!(v.len(), CONTENT_DIM);
        assert!((v.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(*v, content_vector(&reg[i].0));
        for w in &vs[i + 1..] {
            let d: f64 = v.iter().zip(w).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            assert!(d > 1e-3);
        }
    }
}

#[test]
fn dispatch_timeout_semantics() {
    assert_eq!(dispatch_with_timeout(100.0, true, 0.5, 5_000.0), DispatchOutcome::Ack { at: 100.5 });
    assert_eq!(dispatch_with_timeout(100.0, false, 50.0, 5_000.0), DispatchOutcome::Timeout { at: 5_100.0 });
}

#[test]
fn governance_scenarios_map_to_sites() {
    let topo = Topology::default_federation();
    let enforcing = |s| GovernancePolicy::for_scenario(s, &topo).enforcing.into_iter().collect::<Vec<_>>();
    assert_eq!(enforcing(GovScenario::A), Vec::<usize>::new());
    assert_eq!(enforcing(GovScenario::B), vec![0, 1]);
    assert_eq!(enforcing(GovScenario::C), vec![2, 3]);
    assert_eq!(enforcing(GovScenario::D), vec![0, 1, 2, 3]);
    assert!(topo.domains[..2].iter().all(|d| d.site == Site::Edge));

    let gov = GovernancePolicy::for_scenario(GovScenario::B, &topo);
    let report = build_template(PipelineKind::CqiChain).stages[7].clone();
    assert!(gov.pinned(&report, 0));
    assert!(!gov.pinned(&report, 2));
    let mut tagged = build_template(PipelineKind::CqiChain).stages[3].clone();
    assert!(!gov.pinned(&tagged, 0));
    tagged.sovereignty = Sovereignty::LocalOnly;
    assert!(GovernancePolicy::none().pinned(&tagged, 2));
    assert!(GovScenario::parse("Q").is_err());
}

/// Four single-domain brokers of the default topology, driven by hand.
struct MockEnv {
    workers: BTreeMap<DomainId, Vec<LocalWorker>>,
    ledgers: BTreeMap<DomainId, ReservationLedger>,
    down: BTreeSet<DomainId>,
}

impl MockEnv {
    fn new(topo: &Topology) -> MockEnv {
        let mut workers: BTreeMap<DomainId, Vec<LocalWorker>> = BTreeMap::new();
        for w in &topo.workers {
            workers.entry(w.domain).or_default().push(LocalWorker {
                spec: w.clone(),
                view: WorkerLoadView { worker_id: w.worker_id, load: 0.0, observed_at: 0.0 },
            });
        }
        MockEnv { workers, ledgers: BTreeMap::new(), down: BTreeSet::new() }
    }
}

impl FederationEnv for MockEnv {
    fn reachable(&self, _from: DomainId, to: DomainId) -> bool {
        !self.down.contains(&to)
    }

    fn remote_reserve(&mut self, domain: DomainId, stage: &StageSpec) -> Option<(WorkerId, f64)> {
        let ledger = self.ledgers.entry(domain).or_default();
        let pick = cheapest_reservable(&self.workers[&domain], stage, ledger, 0.99)?;
        ledger.add(pick.0, stage.demand);
        Some(pick)
    }

    fn remote_release(&mut self, domain: DomainId, worker: WorkerId, demand: f64) {
        self.ledgers.entry(domain).or_default().add(worker, -demand);
    }

    fn monitor(&self, domain: DomainId, _now: f64) -> Vec<LocalWorker> {
        self.workers[&domain].clone()
    }
}

fn ctx<'a>(m: &'a MarketConfig, f: &'a FederationConfig, r: &'a [(String, Slice)]) -> EpochContext<'a> {
    EpochContext { market: m, fed: f, registry: r }
}

fn pending(id: u64, t: PipelineTemplate) -> PendingPipeline {
    PendingPipeline { id, template: t, excluded: BTreeSet::new() }
}

#[test]
fn empty_epoch_still_pushes_prices() {
    let topo = Topology::default_federation();
    let mut env = MockEnv::new(&topo);
    let mut b = BrokerState::new(0, &topo, GovernancePolicy::none());
    let (m, f, r) = (MarketConfig::default(), FederationConfig::default(), stage_type_registry());
    let out = mape_epoch(&mut b, 0.0, &[], &mut env, &ctx(&m, &f, &r));
    assert!(out.decisions.is_empty());
    let pushes: Vec<_> = out.outbound.iter().filter(|o| matches!(o, Outbound::Push { .. })).collect();
    assert_eq!(pushes.len(), 3);
    if let Outbound::Push { price, .. } = pushes[0] {
        assert_eq!(price.origin_domain, 0);
        // signal carries prices per type, no worker identities
        assert!(price.prices.keys().all(|k| r.iter().any(|(t, _)| t == k)));
    }
    // next push only after the exchange period
    let out = mape_epoch(&mut b, 5_000.0, &[], &mut env, &ctx(&m, &f, &r));
    assert!(out.outbound.is_empty());
    assert_eq!(b.mape_epoch_counter, 2);
}

#[test]
fn one_pipeline_is_placed_and_ledger_committed() {
    let topo = Topology::default_federation();
    let mut env = MockEnv::new(&topo);
    let mut b = BrokerState::new(1, &topo, GovernancePolicy::none());
    let (m, f, r) = (MarketConfig::default(), FederationConfig::default(), stage_type_registry());
    let out =
        mape_epoch(&mut b, 0.0, &[pending(7, build_template(PipelineKind::AnomalySp))], &mut env, &ctx(&m, &f, &r));
    let EpochDecision::Placed { id, assignment, cost } = &out.decisions[0] else { panic!("{:?}", out.decisions) };
    assert_eq!(*id, 7);
    assert_eq!(assignment.len(), 8);
    assert!(assignment.iter().all(|w| topo.workers[*w].domain == 1));
    assert!(*cost > 0.0);
    assert_eq!(out.committed.values().sum::<f64>(), 8.0);
    assert!(b.ledger.additions.is_empty());
}

fn single_stage(ty: &str) -> PipelineTemplate {
    let s = StageSpec {
        stage_id: 0,
        stage_type: ty.into(),
        demand: 1.0,
        output_rate: 1.0,
        home_domain: 0,
        slice: Slice::BestEffort,
        sovereignty: Sovereignty::Free,
    };
    PipelineTemplate::new("one", vec![s], vec![], 800.0).unwrap()
}

#[test]
fn competing_pipelines_never_double_book() {
    let topo = Topology::default_federation();
    let mut env = MockEnv::new(&topo);
    let only = WorkerSpec { worker_id: 0, domain: 0, slice: Slice::Urllc, capacity: 1.0, speed: 1.0, base_bid: 10.0 };
    env.workers.insert(
        0,
        vec![LocalWorker { spec: only, view: WorkerLoadView { worker_id: 0, load: 0.0, observed_at: 0.0 } }],
    );
    let mut b = BrokerState::new(0, &topo, GovernancePolicy::none());
    let (m, f, r) = (MarketConfig::default(), FederationConfig::default(), stage_type_registry());
    let inbox = [pending(1, single_stage("SMO:report")), pending(2, single_stage("SMO:report"))];
    let out = mape_epoch(&mut b, 0.0, &inbox, &mut env, &ctx(&m, &f, &r));
    assert!(matches!(&out.decisions[0], EpochDecision::Placed { assignment, .. } if assignment == &vec![0]));
    // no peer knowledge yet, so the second has nowhere to go
    assert_eq!(out.decisions[1], EpochDecision::Rejected { id: 2, reason: RejectReason::Infeasible });
    assert_eq!(out.committed, BTreeMap::from([(0, 1.0)]));
}

/// Feed broker `b` one push from each peer as issued at `at`.
fn deliver_pushes(b: &mut BrokerState, env: &MockEnv, topo: &Topology, at: f64, reg: &[(String, Slice)]) {
    for d in 0..topo.domains.len() {
        if d == b.domain || env.down.contains(&d) {
            continue;
        }
        let mut peer = BrokerState::new(d, topo, GovernancePolicy::none());
        peer.workers = env.workers[&d].clone();
        let price = peer.price_signal(reg, 0.99, at);
        let summary = peer.summary(reg);
        b.peers.get_mut(&d).unwrap().receive(price, summary, at, 3);
    }
}

#[test]
fn full_origin_spills_to_a_peer() {
    let topo = Topology::default_federation();
    let mut env = MockEnv::new(&topo);
    let r = stage_type_registry();
    let mut b = BrokerState::new(0, &topo, GovernancePolicy::none());
    deliver_pushes(&mut b, &env, &topo, 0.0, &r);
    for w in env.workers.get_mut(&0).unwrap() {
        w.view.load = 4.0;
    }
    let (m, f) = (MarketConfig::default(), FederationConfig::default());
    let out =
        mape_epoch(&mut b, 1.0, &[pending(1, build_template(PipelineKind::CqiChain))], &mut env, &ctx(&m, &f, &r));
    let EpochDecision::Placed { assignment, .. } = &out.decisions[0] else { panic!("{:?}", out.decisions) };
    assert!(assignment.iter().all(|w| topo.workers[*w].domain != 0));
    assert!(out.committed.is_empty());
}

#[test]
fn unreachable_peer_defers_by_tau_fed() {
    let topo = Topology::default_federation();
    let mut env = MockEnv::new(&topo);
    let r = stage_type_registry();
    let mut b = BrokerState::new(0, &topo, GovernancePolicy::none());
    deliver_pushes(&mut b, &env, &topo, 0.0, &r);
    for w in env.workers.get_mut(&0).unwrap() {
        w.view.load = 4.0;
    }
    env.down.insert(1);
    let (m, f) = (MarketConfig::default(), FederationConfig::default());
    let out =
        mape_epoch(&mut b, 100.0, &[pending(1, build_template(PipelineKind::CqiChain))], &mut env, &ctx(&m, &f, &r));
    assert_eq!(out.decisions[0], EpochDecision::Deferred { id: 1, retry_at: 5_100.0, unreachable: 1 });
    // retry with the peer excluded goes elsewhere
    let retry =
        PendingPipeline { id: 1, template: build_template(PipelineKind::CqiChain), excluded: BTreeSet::from([1]) };
    let out = mape_epoch(&mut b, 5_100.0, &[retry], &mut env, &ctx(&m, &f, &r));
    let EpochDecision::Placed { assignment, .. } = &out.decisions[0] else { panic!("{:?}", out.decisions) };
    assert!(assignment.iter().all(|w| topo.workers[*w].domain >= 2));
}

#[test]
fn stale_peer_prices_are_not_used() {
    let topo = Topology::default_federation();
    let mut env = MockEnv::new(&topo);
    let r = stage_type_registry();
    let mut b = BrokerState::new(0, &topo, GovernancePolicy::none());
    deliver_pushes(&mut b, &env, &topo, 0.0, &r);
    for w in env.workers.get_mut(&0).unwrap() {
        w.view.load = 4.0;
    }
    let (m, f) = (MarketConfig::default(), FederationConfig::default());
    let now = f.staleness_bound() + 1.0;
    let out =
        mape_epoch(&mut b, now, &[pending(1, build_template(PipelineKind::CqiChain))], &mut env, &ctx(&m, &f, &r));
    assert_eq!(out.decisions[0], EpochDecision::Rejected { id: 1, reason: RejectReason::Infeasible });
}

#[test]
fn probes_run_every_fifth_round_and_reinstate() {
    let topo = Topology::default_federation();
    let mut env = MockEnv::new(&topo);
    let r = stage_type_registry();
    let (m, f) = (MarketConfig::default(), FederationConfig::default());
    let mut b = BrokerState::new(0, &topo, GovernancePolicy::none());
    let view = b.peers.get_mut(&2).unwrap();
    view.receive(msg(2, 0.0), summary_for(2, "t", 0.0, 1.0), 0.0, 3);
    for _ in 0..3 {
        on_price_push_result(view, false, 3);
    }
    // partition heals at round 12; probes only in rounds 5, 10, 15, ...
    let mut reinstated_at = None;
    for round in 1..=20u64 {
        let now = (round - 1) as f64 * f.delta_prop_ms;
        let out = mape_epoch(&mut b, now, &[], &mut env, &ctx(&m, &f, &r));
        let probed = out.outbound.iter().any(|o| matches!(o, Outbound::Probe { to: 2 }));
        assert_eq!(probed, reinstated_at.is_none() && round % 5 == 0, "round {round}");
        if probed {
            let healed = round >= 12;
            let peer_hist = vec![(now - 1.0, msg(2, now - 1.0))];
            if recovery_probe(&mut b, 2, healed, &peer_hist, f.history_capacity()) {
                reinstated_at = Some(round);
            }
        }
    }
    assert_eq!(reinstated_at, Some(15));
    let v = &b.peers[&2];
    assert!(v.healthy);
    let times: Vec<f64> = v.price_history.iter().map(|x| x.0).collect();
    assert!(times.windows(2).all(|w| w[0] <= w[1]));
    assert!(times.contains(&0.0) && times.contains(&139_999.0));
}

#[test]
fn probe_during_partition_keeps_peer_unhealthy() {
    let mut b = broker(0);
    let view = b.peers.get_mut(&3).unwrap();
    for _ in 0..3 {
        on_price_push_result(view, false, 3);
    }
    assert!(!recovery_probe(&mut b, 3, false, &[], 3));
    assert!(!b.peers[&3].healthy);
}

#[test]
fn mape_trace_is_deterministic() {
    let run = || {
        let topo = Topology::default_federation();
        let mut env = MockEnv::new(&topo);
        let r = stage_type_registry();
        let (m, f) = (MarketConfig::default(), FederationConfig::default());
        let mut b = BrokerState::new(1, &topo, GovernancePolicy::none());
        deliver_pushes(&mut b, &env, &topo, 0.0, &r);
        let mut trace = Vec::new();
        for (i, k) in PipelineKind::ALL.iter().cycle().take(9).enumerate() {
            let out = mape_epoch(
                &mut b,
                i as f64 * 700.0,
                &[pending(i as u64, build_template(*k))],
                &mut env,
                &ctx(&m, &f, &r),
            );
            for (w, d) in &out.committed {
                env.workers.get_mut(&1).unwrap().iter_mut().find(|x| x.spec.worker_id == *w).unwrap().view.load += d;
            }
            trace.push(format!("{:?}|{:?}", out.decisions, out.outbound));
        }
        trace
    };
    assert_eq!(run(), run());
}
