use std::collections::{BTreeMap, BTreeSet};

use fedplace_core::dag::{build_template, PipelineKind, PipelineTemplate, Sovereignty, StageEdge, StageSpec};
use fedplace_core::federation::GovernancePolicy;
use fedplace_core::market::RejectReason;
use fedplace_core::strategies::*;
use fedplace_core::topology::{LatencyModel, Site, Slice, Topology, WorkerSpec};
use proptest::prelude::*;

fn worker(id: usize, domain: usize, slice: Slice, capacity: f64, load: f64) -> SnapshotWorker {
    SnapshotWorker { spec: WorkerSpec { worker_id: id, domain, slice, capacity, speed: 1.0, base_bid: 10.0 }, load }
}

fn snap(workers: Vec<SnapshotWorker>, sites: Vec<Site>, origin: Option<usize>) -> TopologySnapshot {
    TopologySnapshot { workers, sites, latency: LatencyModel::default(), origin }
}

fn pipeline(slices: &[Slice], edges: &[(usize, usize)]) -> PipelineTemplate {
    let stages = slices
        .iter()
        .enumerate()
        .map(|(i, &slice)| StageSpec {
            stage_id: i,
            stage_type: format!("T{i}"),
            demand: 1.0,
            output_rate: 1.0,
            home_domain: 0,
            slice,
            sovereignty: Sovereignty::Free,
        })
        .collect();
    let edges = edges.iter().map(|&(from, to)| StageEdge { from, to, latency_bound: None }).collect();
    PipelineTemplate::new("test", stages, edges, 800.0).unwrap()
}

fn chain(n: usize) -> PipelineTemplate {
    let e: Vec<(usize, usize)> = (1..n).map(|i| (i - 1, i)).collect();
    pipeline(&vec![Slice::BestEffort; n], &e)
}

/// Independent cost: with unit demands the cumulative utilisation on a worker
/// hosting k stages is (k * load + k (k + 1) / 2) / C, whatever the order.
fn reference_cost(p: &PipelineTemplate, s: &TopologySnapshot, a: &[usize]) -> f64 {
    let lat_model = LatencyModel::default();
    let by_id: BTreeMap<usize, &SnapshotWorker> = s.workers.iter().map(|w| (w.spec.worker_id, w)).collect();
    let site = |w: usize| s.sites[by_id[&w].spec.domain];
    let link = |x: usize, y: usize| {
        if x == y {
            0.0
        } else if site(x) == site(y) {
            lat_model.lan_ms
        } else {
            lat_model.wan_ms
        }
    };
    let mut lat: f64 = p.edges.iter().map(|e| link(a[e.from], a[e.to])).sum();
    if let Some(o) = s.origin {
        let indeg: Vec<usize> = (0..p.len()).map(|v| p.edges.iter().filter(|e| e.to == v).count()).collect();
        for v in (0..p.len()).filter(|&v| indeg[v] == 0) {
            lat += if s.sites[o] == site(a[v]) { lat_model.lan_ms } else { lat_model.wan_ms };
        }
    }
    let mut count: BTreeMap<usize, f64> = BTreeMap::new();
    for &w in a {
        *count.entry(w).or_insert(0.0) += 1.0;
    }
    let util: f64 =
        count.iter().map(|(w, &k)| (k * by_id[w].load + k * (k + 1.0) / 2.0) / by_id[w].spec.capacity).sum();
    let domains: BTreeSet<usize> = a.iter().map(|w| by_id[w].spec.domain).collect();
    lat + util + domains.len() as f64
}

/// Exhaustive minimum over all slice- and capacity-feasible assignments.
fn exhaustive(p: &PipelineTemplate, s: &TopologySnapshot) -> Option<f64> {
    let n = p.len();
    let m = s.workers.len();
    let mut best: Option<f64> = None;
    let mut idx = vec![0usize; n];
    loop {
        let a: Vec<usize> = idx.iter().map(|&i| s.workers[i].spec.worker_id).collect();
        let slice_ok = (0..n).all(|v| s.workers[idx[v]].spec.slice.hosts(p.stages[v].slice));
        let mut used = vec![0.0; m];
        for &i in &idx {
            used[i] += 1.0;
        }
        let cap_ok = (0..m).all(|i| s.workers[i].load + used[i] <= s.workers[i].spec.capacity + 1e-9);
        if slice_ok && cap_ok {
            let c = reference_cost(p, s, &a);
            best = Some(best.map_or(c, |b: f64| b.min(c)));
        }
        let mut k = 0;
        loop {
            if k == n {
                return best;
            }
            idx[k] += 1;
            if idx[k] < m {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
    }
}

fn none() -> GovernancePolicy {
    GovernancePolicy::none()
}

#[test]
fn placement_cost_examples() {
    let s = snap(
        vec![worker(0, 0, Slice::Urllc, 4.0, 0.0), worker(1, 1, Slice::Urllc, 4.0, 0.0)],
        vec![Site::Edge, Site::Cloud],
        None,
    );
    let w = CostWeights::default();
    assert!((placement_cost(&[0], &chain(1), &s, &w) - 1.25).abs() < 1e-12);

    // two-stage chain on one worker: no latency, one domain
    let same = placement_cost(&[0, 0], &chain(2), &s, &CostWeights { alpha: 1.0, beta: 0.0, zeta: 1.0 });
    assert_eq!(same, 1.0);
    // split edge <-> cloud: one WAN hop, two domains
    let split = placement_cost(&[0, 1], &chain(2), &s, &CostWeights { alpha: 1.0, beta: 0.0, zeta: 1.0 });
    assert_eq!(split, 50.0 + 2.0);
}

#[test]
fn oracle_two_stage_chain_matches_enumeration() {
    let s =
        snap(vec![worker(0, 0, Slice::Urllc, 4.0, 1.0), worker(1, 0, Slice::Urllc, 4.0, 0.0)], vec![Site::Edge], None);
    let p = chain(2);
    let d = oracle_place(&p, &s, &CostWeights::default(), &none());
    assert!(d.accepted);
    assert!((d.total_cost - exhaustive(&p, &s).unwrap()).abs() < 1e-9);
    assert!((d.total_cost - reference_cost(&p, &s, &d.assignment)).abs() < 1e-9);
}

#[test]
fn oracle_rejects_when_capacity_short() {
    let s = snap(vec![worker(0, 0, Slice::Urllc, 2.0, 0.0)], vec![Site::Edge], None);
    let d = oracle_place(&chain(3), &s, &CostWeights::default(), &none());
    assert!(!d.accepted);
    assert_eq!(d.reject_reason, Some(RejectReason::Infeasible));
}

#[test]
fn scalable_oracle_is_near_exhaustive_on_ran_entangled() {
    let p = build_template(PipelineKind::RanEntangled);
    let s = snap(
        vec![
            worker(0, 0, Slice::Urllc, 4.0, 0.0),
            worker(1, 0, Slice::Urllc, 4.0, 0.0),
            worker(2, 1, Slice::Urllc, 4.0, 0.0),
            worker(3, 1, Slice::Urllc, 4.0, 0.0),
        ],
        vec![Site::Edge, Site::Edge],
        Some(0),
    );
    let w = CostWeights::default();
    let best = exhaustive(&p, &s).unwrap();
    let a = oracle_heuristic(&p, &s, &w, &none()).unwrap();
    let c = reference_cost(&p, &s, &a);
    assert!(c <= 1.05 * best, "heuristic {c} vs exhaustive {best}");
    let exact = oracle_place(&p, &s, &w, &none());
    assert!((exact.total_cost - best).abs() < 1e-9);
}

#[test]
fn rr_examples() {
    let s = snap((0..3).map(|i| worker(i, 0, Slice::Urllc, 4.0, 0.0)).collect(), vec![Site::Edge], None);
    let mut cursor = 0;
    let d = rr_place(&chain(3), &s, &mut cursor, &none());
    assert_eq!(d.assignment, vec![0, 1, 2]);
    assert_eq!(cursor, 0);
    let d = rr_place(&chain(1), &s, &mut cursor, &none());
    assert_eq!(d.assignment, vec![0]);
    assert_eq!(cursor, 1);

    let mixed = snap(
        vec![
            worker(0, 0, Slice::Urllc, 4.0, 0.0),
            worker(1, 0, Slice::Embb, 4.0, 0.0),
            worker(2, 0, Slice::Urllc, 4.0, 0.0),
        ],
        vec![Site::Edge],
        None,
    );
    let mut cursor = 1;
    let p = pipeline(&[Slice::Urllc], &[]);
    assert_eq!(rr_place(&p, &mixed, &mut cursor, &none()).assignment, vec![2]);
    assert_eq!(rr_place(&p, &mixed, &mut cursor, &none()).assignment, vec![0]);
}

#[test]
fn rr_ignores_load() {
    let s =
        snap(vec![worker(0, 0, Slice::Urllc, 4.0, 4.0), worker(1, 0, Slice::Urllc, 4.0, 0.0)], vec![Site::Edge], None);
    let mut cursor = 0;
    let d = rr_place(&chain(1), &s, &mut cursor, &none());
    assert!(d.accepted);
    assert_eq!(d.assignment, vec![0]);
}

fn default_snapshot(origin: usize) -> TopologySnapshot {
    let topo = Topology::default_federation();
    let loads = vec![0.0; topo.workers.len()];
    TopologySnapshot::from_topology(&topo, &loads, |_| true, Some(origin))
}

#[test]
fn latency_greedy_stays_on_site_when_slices_allow() {
    let s = default_snapshot(0);
    for k in PipelineKind::ALL {
        let d = latency_greedy_place(&build_template(k), &s, &none());
        assert!(d.accepted);
        for w in &d.assignment {
            let dom = s.workers[s.position(*w).unwrap()].spec.domain;
            assert_eq!(s.sites[dom], Site::Edge, "{k} crossed the WAN");
        }
    }
}

#[test]
fn spillover_with_full_origin_uses_nearest_peer() {
    let topo = Topology::default_federation();
    let mut loads = vec![0.0; topo.workers.len()];
    for w in &topo.domains[0].workers {
        loads[*w] = 4.0;
    }
    let s = TopologySnapshot::from_topology(&topo, &loads, |_| true, Some(0));
    let d = spillover_place(&build_template(PipelineKind::CqiChain), &s, &none());
    assert!(d.accepted);
    assert!(d.assignment.iter().all(|w| topo.workers[*w].domain == 1));
}

#[test]
fn locality_rejects_when_origin_exhausted() {
    let topo = Topology::default_federation();
    let mut loads = vec![0.0; topo.workers.len()];
    for w in &topo.domains[2].workers {
        loads[*w] = 4.0;
    }
    let s = TopologySnapshot::from_topology(&topo, &loads, |_| true, Some(2));
    let d = locality_place(&build_template(PipelineKind::CqiChain), &s, &none());
    assert!(!d.accepted);
    let s = default_snapshot(2);
    let d = locality_place(&build_template(PipelineKind::CqiChain), &s, &none());
    // cqi-chain starts with eMBB stages, which d3 (eMBB) can host
    assert!(d.accepted);
    assert!(d.assignment.iter().all(|w| topo.workers[*w].domain == 2));
}

#[test]
fn heuristics_agree_on_single_domain_topology() {
    let s = snap((0..6).map(|i| worker(i, 0, Slice::Urllc, 4.0, 0.0)).collect(), vec![Site::Edge], Some(0));
    let p = chain(3);
    for d in [locality_place(&p, &s, &none()), latency_greedy_place(&p, &s, &none()), spillover_place(&p, &s, &none())]
    {
        assert!(d.accepted);
        assert_eq!(d.domains_crossed, 0);
    }
}

#[test]
fn sharded_oracle_with_fresh_snapshots_matches_oracle() {
    let topo = Topology::default_federation();
    let loads: Vec<f64> = (0..topo.workers.len()).map(|i| (i % 5) as f64 * 0.5).collect();
    let full = TopologySnapshot::from_topology(&topo, &loads, |_| true, Some(1));
    let coord = TopologySnapshot::from_topology(&topo, &loads, |w| topo.workers[w].domain == 0, Some(1));
    let pulled: Vec<PeerSnapshot> = (1..4)
        .map(|d| PeerSnapshot {
            domain: d,
            workers: full.workers.iter().filter(|w| w.spec.domain == d).cloned().collect(),
            timed_out: false,
        })
        .collect();
    let w = CostWeights::default();
    for k in PipelineKind::ALL {
        let p = build_template(k);
        assert_eq!(sharded_oracle_place(&p, &coord, &pulled, &w, &none()), oracle_place(&p, &full, &w, &none()));
    }
}

#[test]
fn sharded_oracle_excludes_timed_out_peer() {
    let topo = Topology::default_federation();
    let full = default_snapshot(0);
    let coord = TopologySnapshot::from_topology(&topo, &[0.0; 48], |w| topo.workers[w].domain == 0, Some(0));
    let pulled: Vec<PeerSnapshot> = (1..4)
        .map(|d| PeerSnapshot {
            domain: d,
            workers: full.workers.iter().filter(|w| w.spec.domain == d).cloned().collect(),
            timed_out: d == 3,
        })
        .collect();
    let merged = merge_snapshots(&coord, &pulled);
    assert_eq!(merged.workers.len(), 36);
    let d = sharded_oracle_place(
        &build_template(PipelineKind::CqiChain),
        &coord,
        &pulled,
        &CostWeights::default(),
        &none(),
    );
    assert!(d.accepted);
    assert!(d.assignment.iter().all(|w| topo.workers[*w].domain != 3));
}

fn slices() -> impl Strategy<Value = Slice> {
    prop_oneof![Just(Slice::Urllc), Just(Slice::Embb), Just(Slice::BestEffort)]
}

prop_compose! {
    fn small_instance()(
        n in 1usize..=4,
        m in 1usize..=6,
    )(
        stage_slices in proptest::collection::vec(slices(), n),
        keep in proptest::collection::vec(any::<bool>(), n * (n - 1) / 2),
        workers in proptest::collection::vec((slices(), 1u8..=4, 0u8..=4, 0usize..3), m),
        cloud in proptest::collection::vec(any::<bool>(), 3),
        origin in proptest::option::of(0usize..3),
    ) -> (PipelineTemplate, TopologySnapshot) {
        let n = stage_slices.len();
        let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
        let edges: Vec<(usize, usize)> = pairs.into_iter().zip(keep).filter(|p| p.1).map(|p| p.0).collect();
        let p = pipeline(&stage_slices, &edges);
        let ws = workers
            .iter()
            .enumerate()
            .map(|(i, &(sl, cap, load, dom))| worker(i, dom, sl, cap as f64, (load as f64).min(cap as f64)))
            .collect();
        let sites = cloud.iter().map(|&c| if c { Site::Cloud } else { Site::Edge }).collect();
        (p, snap(ws, sites, origin))
    }
}

fn random_topology_snapshot() -> impl Strategy<Value = (TopologySnapshot, usize)> {
    (proptest::collection::vec(0u8..=4, 48), 0usize..4).prop_map(|(loads, origin)| {
        let topo = Topology::default_federation();
        let loads: Vec<f64> = loads.into_iter().map(|l| l as f64).collect();
        (TopologySnapshot::from_topology(&topo, &loads, |_| true, Some(origin)), origin)
    })
}

fn check_slices(p: &PipelineTemplate, s: &TopologySnapshot, d: &PlacementDecision) -> bool {
    !d.accepted
        || d.assignment
            .iter()
            .enumerate()
            .all(|(v, w)| s.workers[s.position(*w).unwrap()].spec.slice.hosts(p.stages[v].slice))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn oracle_matches_exhaustive_on_small_instances((p, s) in small_instance()) {
        let d = oracle_place(&p, &s, &CostWeights::default(), &none());
        match exhaustive(&p, &s) {
            None => prop_assert!(!d.accepted),
            Some(best) => {
                prop_assert!(d.accepted);
                prop_assert!((d.total_cost - best).abs() < 1e-9, "oracle {} vs {}", d.total_cost, best);
                prop_assert!((reference_cost(&p, &s, &d.assignment) - best).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn placement_cost_ignores_worker_labels((p, s) in small_instance(), seed in any::<u64>()) {
        let d = oracle_place(&p, &s, &CostWeights::default(), &none());
        prop_assume!(d.accepted);
        // relabel ids with a seeded permutation shifted by 100
        let m = s.workers.len();
        let mut perm: Vec<usize> = (0..m).collect();
        let mut x = seed;
        for i in (1..m).rev() {
            x = x.wrapping_mul(6364136223846793005).wrapping_add(1);
            perm.swap(i, (x >> 33) as usize % (i + 1));
        }
        let mut relabeled = s.clone();
        for (i, w) in relabeled.workers.iter_mut().enumerate() {
            w.spec.worker_id = 100 + perm[i];
        }
        let a: Vec<usize> = d.assignment.iter().map(|w| 100 + perm[s.position(*w).unwrap()]).collect();
        let w = CostWeights::default();
        prop_assert!((placement_cost(&a, &p, &relabeled, &w) - placement_cost(&d.assignment, &p, &s, &w)).abs() < 1e-9);
    }

    #[test]
    fn rr_spreads_evenly(n in 1usize..=8, k in 1usize..=4, slice in slices()) {
        let s = snap((0..n).map(|i| worker(i, 0, slice, 4.0, 0.0)).collect(), vec![Site::Edge], None);
        let p = pipeline(&vec![slice; k * n], &[]);
        let mut cursor = 0;
        let d = rr_place(&p, &s, &mut cursor, &none());
        let mut count = vec![0; n];
        for w in d.assignment {
            count[w] += 1;
        }
        prop_assert!(count.iter().all(|&c| c == k));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn every_strategy_honours_slices((s, _) in random_topology_snapshot(), kind in 0usize..3, cursor0 in 0usize..48) {
        let p = build_template(PipelineKind::ALL[kind]);
        let w = CostWeights::default();
        let mut cursor = cursor0;
        let decisions = [
            oracle_place(&p, &s, &w, &none()),
            rr_place(&p, &s, &mut cursor, &none()),
            locality_place(&p, &s, &none()),
            latency_greedy_place(&p, &s, &none()),
            spillover_place(&p, &s, &none()),
        ];
        for d in &decisions {
            prop_assert!(check_slices(&p, &s, d));
        }
    }
}
