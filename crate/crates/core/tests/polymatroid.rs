use std::collections::{BTreeMap, BTreeSet};

use fedplace_core::dag::{build_template, classify_structure, PipelineKind, Structure};
use fedplace_core::polymatroid::*;
use fedplace_core::Error;
use proptest::prelude::*;

fn dag(n: usize, edges: &[(usize, usize)], caps: &[f64]) -> ServiceDag {
    ServiceDag::new((0..n).map(|i| format!("n{i}")).collect(), edges.to_vec(), caps.to_vec()).unwrap()
}

fn set(xs: &[usize]) -> BTreeSet<usize> {
    xs.iter().copied().collect()
}

/// Reference rank: cheapest family of nodes (internal or leaf) whose
/// reachable leaves cover S. Any cover reduces to an antichain cover of no
/// larger cost, so the minimum is the same.
fn rank_oracle(d: &ServiceDag, s: &BTreeSet<usize>) -> f64 {
    let n = d.len();
    let children: Vec<Vec<usize>> =
        (0..n).map(|v| d.edges.iter().filter(|e| e.0 == v).map(|e| e.1).collect()).collect();
    // cover[v]: bitmask over node ids of the leaves reachable from v
    let mut cover = vec![0u32; n];
    for v in (0..n).rev() {
        let mut seen = vec![false; n];
        let mut stack = vec![v];
        while let Some(u) = stack.pop() {
            if std::mem::replace(&mut seen[u], true) {
                continue;
            }
            if children[u].is_empty() {
                cover[v] |= 1 << u;
            }
            stack.extend(&children[u]);
        }
    }
    let want: u32 = s.iter().map(|&l| 1u32 << l).sum();
    let mut best = f64::INFINITY;
    for mask in 0u32..(1 << n) {
        let (mut covered, mut cost) = (0u32, 0.0);
        for v in (0..n).filter(|v| mask >> v & 1 == 1) {
            covered |= cover[v];
            cost += d.capacity[v];
        }
        if want & !covered == 0 {
            best = best.min(cost);
        }
    }
    best
}

/// Reference max-flow: minimum over all s-t vertex cuts.
fn min_cut_oracle(g: &FlowNetwork, s: usize, t: usize) -> f64 {
    let mut best = f64::INFINITY;
    for mask in 0u32..(1 << g.n) {
        if mask >> s & 1 == 0 || mask >> t & 1 == 1 {
            continue;
        }
        let cut: f64 = g.arcs.iter().filter(|a| mask >> a.0 & 1 == 1 && mask >> a.1 & 1 == 0).map(|a| a.2).sum();
        best = best.min(cut);
    }
    best
}

#[test]
fn leaf_sets_of_small_graphs() {
    let d = dag(3, &[(0, 1), (0, 2)], &[1.0; 3]);
    let f = leaf_sets(&d).unwrap();
    assert_eq!(f.sets, vec![(0, set(&[1, 2]))]);

    let d = dag(3, &[(0, 1), (1, 2)], &[1.0; 3]);
    assert_eq!(leaf_sets(&d).unwrap().sets, vec![(0, set(&[2])), (1, set(&[2]))]);

    let d = dag(4, &[(0, 1), (0, 2), (1, 3), (2, 3)], &[1.0; 4]);
    assert_eq!(leaf_sets(&d).unwrap().sets, vec![(0, set(&[3])), (1, set(&[3])), (2, set(&[3]))]);
}

#[test]
fn laminarity_examples() {
    let nested = LeafSetFamily { sets: vec![(0, set(&[0, 1])), (1, set(&[0])), (2, set(&[1]))] };
    assert_eq!(is_laminar(&nested), (true, None));
    let crossing = LeafSetFamily { sets: vec![(0, set(&[0, 1])), (1, set(&[1, 2]))] };
    assert_eq!(is_laminar(&crossing), (false, Some((set(&[0, 1]), set(&[1, 2])))));
    let chain = resource_dag(&build_template(PipelineKind::CqiChain), 4.0);
    assert!(is_laminar(&leaf_sets(&chain).unwrap()).0);
}

#[test]
fn rank_examples() {
    let single = dag(1, &[], &[10.0]);
    assert_eq!(rank(&single, &set(&[0])).unwrap(), 10.0);

    let two_level = dag(5, &[(0, 1), (0, 2), (1, 3), (2, 4)], &[10.0, 8.0, 8.0, 20.0, 20.0]);
    assert_eq!(rank(&two_level, &set(&[3, 4])).unwrap(), 10.0);
    assert_eq!(rank(&two_level, &set(&[3])).unwrap(), 8.0);
    assert_eq!(rank(&two_level, &BTreeSet::new()).unwrap(), 0.0);
    assert!(matches!(rank(&two_level, &set(&[1])), Err(Error::Argument(_))));
}

#[test]
fn feasibility_examples() {
    let d = dag(5, &[(0, 1), (0, 2), (1, 3), (2, 4)], &[10.0, 8.0, 8.0, 20.0, 20.0]);
    let x = |a: f64, b: f64| AllocationVector { x: BTreeMap::from([(3, a), (4, b)]) };
    let none = GovernanceBounds::default();
    assert!(is_feasible(&x(0.0, 0.0), &d, &none).unwrap());
    assert!(!is_feasible(&x(8.0, 8.0), &d, &none).unwrap());
    assert!(is_feasible(&x(5.0, 5.0), &d, &none).unwrap());
    let bounded = GovernanceBounds { u: BTreeMap::from([(3, 4.0)]) };
    assert!(!is_feasible(&x(5.0, 5.0), &d, &bounded).unwrap());
}

#[test]
fn submodularity_examples() {
    let tree = dag(5, &[(0, 1), (0, 2), (1, 3), (2, 4)], &[10.0, 8.0, 8.0, 20.0, 20.0]);
    let r = check_submodular(&tree, 0, 1).unwrap();
    assert!(r.laminar && r.submodular && r.gamma == 0 && r.exhaustive);

    let single = dag(1, &[], &[3.0]);
    assert!(check_submodular(&single, 0, 1).unwrap().submodular);

    let ran = resource_dag(&build_template(PipelineKind::RanEntangled), 4.0);
    let r = check_submodular(&ran, 0, 1).unwrap();
    assert!(!r.laminar);
    let (a, b) = r.witness.unwrap();
    assert!(!a.is_subset(&b) && !b.is_subset(&a) && !a.is_disjoint(&b));
}

#[test]
fn max_flow_examples() {
    let one = FlowNetwork { n: 2, arcs: vec![(0, 1, 7.0)] };
    assert_eq!(max_flow(&one, 0, 1).unwrap(), 7.0);
    // s=0, p=1, q=2, t=3
    let diamond = FlowNetwork { n: 4, arcs: vec![(0, 1, 3.0), (0, 2, 4.0), (1, 3, 5.0), (2, 3, 2.0)] };
    assert_eq!(max_flow(&diamond, 0, 3).unwrap(), 5.0);
    let cut_off = FlowNetwork { n: 3, arcs: vec![(0, 1, 3.0)] };
    assert_eq!(max_flow(&cut_off, 0, 2).unwrap(), 0.0);
    assert!(max_flow(&one, 0, 0).is_err());
}

#[test]
fn ran_entangled_quotient_by_home_domain_is_a_four_node_tree() {
    let t = build_template(PipelineKind::RanEntangled);
    let d = resource_dag(&t, 4.0);
    let part: Vec<usize> = t.stages.iter().map(|s| s.home_domain).collect();
    let view = encapsulate(&d, &part).unwrap();
    assert_eq!(view.quotient_nodes.len(), 4);
    assert_eq!(view.quotient_edges.len(), 3);
    assert_eq!(classify_structure(&view.quotient_digraph()).class, Structure::Tree);
}

#[test]
fn single_domain_quotient_has_no_edges() {
    let t = build_template(PipelineKind::CqiChain);
    let d = resource_dag(&t, 4.0);
    let view = encapsulate(&d, &[0; 8]).unwrap();
    assert_eq!(view.quotient_nodes, vec![0]);
    assert!(view.quotient_edges.is_empty());
    // chain of capacity-4 nodes carries 4
    assert_eq!(view.composite_capacity[&0], 4.0);
}

#[test]
fn two_node_chain_split_keeps_node_capacities() {
    let d = dag(2, &[(0, 1)], &[3.0, 5.0]);
    let view = encapsulate(&d, &[0, 1]).unwrap();
    assert_eq!(view.quotient_edges, vec![(0, 1)]);
    assert_eq!(view.composite_capacity[&0], 3.0);
    assert_eq!(view.composite_capacity[&1], 5.0);
}

#[test]
fn disconnected_class_is_a_structural_error() {
    let d = dag(3, &[(0, 1), (1, 2)], &[1.0; 3]);
    assert!(matches!(encapsulate(&d, &[0, 1, 0]), Err(Error::Structural(_))));
}

#[test]
fn template_quotients_are_tree_or_sp() {
    for k in PipelineKind::ALL {
        let t = build_template(k);
        let d = resource_dag(&t, 4.0);
        let view = encapsulate(&d, &component_partition(&t)).unwrap();
        let class = classify_structure(&view.quotient_digraph()).class;
        assert_ne!(class, Structure::General, "{k}");
    }
}

#[test]
fn template_laminarity_matches_structure() {
    for (k, want) in
        [(PipelineKind::CqiChain, true), (PipelineKind::AnomalySp, true), (PipelineKind::RanEntangled, false)]
    {
        let d = resource_dag(&build_template(k), 4.0);
        assert_eq!(check_submodular(&d, 0, 7).unwrap().laminar, want, "{k}");
    }
}

/// Random DAG on up to `max_n` nodes with edges from lower to higher index.
fn random_service_dag(max_n: usize) -> impl Strategy<Value = ServiceDag> {
    (1..=max_n)
        .prop_flat_map(|n| {
            let m = n * (n - 1) / 2;
            (Just(n), proptest::collection::vec(prop::bool::weighted(0.35), m), proptest::collection::vec(1u8..=9, n))
        })
        .prop_map(|(n, keep, caps)| {
            let pairs = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j)));
            let edges: Vec<(usize, usize)> = pairs.zip(keep).filter(|p| p.1).map(|p| p.0).collect();
            dag(n, &edges, &caps.iter().map(|&c| c as f64).collect::<Vec<_>>())
        })
}

/// Random forest: each node > 0 either starts a new tree or hangs under an
/// earlier node, giving a laminar leaf-set family.
fn random_forest(max_n: usize) -> impl Strategy<Value = ServiceDag> {
    (1..=max_n)
        .prop_flat_map(|n| {
            (
                proptest::collection::vec((any::<prop::sample::Index>(), prop::bool::weighted(0.85)), n - 1),
                proptest::collection::vec(1u8..=9, n),
            )
        })
        .prop_map(|(parents, caps)| {
            let n = caps.len();
            let edges: Vec<(usize, usize)> = parents
                .iter()
                .enumerate()
                .filter(|(_, (_, attach))| *attach)
                .map(|(i, (p, _))| (p.index(i + 1), i + 1))
                .collect();
            dag(n, &edges, &caps.iter().map(|&c| c as f64).collect::<Vec<_>>())
        })
}

fn subsets(xs: &[usize]) -> Vec<BTreeSet<usize>> {
    (0u32..(1 << xs.len()))
        .map(|m| xs.iter().enumerate().filter(|(i, _)| m >> i & 1 == 1).map(|p| *p.1).collect())
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn brute_force_rank_matches_cover_oracle(d in random_service_dag(9)) {
        let leaves = d.leaves();
        prop_assume!(leaves.len() <= 6);
        for s in subsets(&leaves) {
            prop_assert_eq!(rank_brute_force(&d, &s).unwrap(), rank_oracle(&d, &s));
        }
    }

    #[test]
    fn rank_is_normalised_and_monotone(d in random_service_dag(10)) {
        let leaves = d.leaves();
        prop_assume!(leaves.len() <= 6);
        prop_assert_eq!(rank(&d, &BTreeSet::new()).unwrap(), 0.0);
        let all = subsets(&leaves);
        let f: Vec<f64> = all.iter().map(|s| rank(&d, s).unwrap()).collect();
        for (i, s) in all.iter().enumerate() {
            for (j, t) in all.iter().enumerate() {
                if s.is_subset(t) {
                    prop_assert!(f[i] <= f[j] + 1e-9);
                }
            }
        }
    }

    #[test]
    fn laminar_families_are_submodular(d in random_forest(12)) {
        prop_assume!(d.leaves().len() <= 6);
        let r = check_submodular(&d, 0, 3).unwrap();
        prop_assert!(r.laminar);
        prop_assert!(r.exhaustive && r.submodular && r.gamma == 0);
    }

    #[test]
    fn fast_rank_matches_brute_force_on_laminar(d in random_forest(12)) {
        prop_assume!(d.internal().len() <= 10 && d.leaves().len() <= 8);
        for s in subsets(&d.leaves()) {
            let fast = rank_laminar(&d, &s).unwrap();
            prop_assert!((fast - rank_brute_force(&d, &s).unwrap()).abs() < 1e-9);
            prop_assert!((fast - rank_oracle(&d, &s)).abs() < 1e-9);
        }
    }

    #[test]
    fn max_flow_equals_min_cut(
        n in 2usize..=6,
        arcs in proptest::collection::vec((0usize..6, 0usize..6, 0u8..=9), 0..=10),
    ) {
        let arcs: Vec<(usize, usize, f64)> =
            arcs.into_iter().filter(|a| a.0 < n && a.1 < n && a.0 != a.1).map(|a| (a.0, a.1, a.2 as f64)).collect();
        let g = FlowNetwork { n, arcs };
        prop_assert_eq!(max_flow(&g, 0, n - 1).unwrap(), min_cut_oracle(&g, 0, n - 1));
    }
}
