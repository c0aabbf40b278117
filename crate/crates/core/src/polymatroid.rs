//! Service-dependency DAGs: leaf sets, laminarity, the rank function,
//! submodularity checks, max-flow and integrator encapsulation.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dag::{Digraph, PipelineTemplate};
use crate::error::{Error, Result};
use crate::topology::DomainId;

/// Resource DAG. Edges point from a composite service to the services it
/// depends on, so leaves (out-degree 0) are base services.
#[derive(Clone, Debug, PartialEq)]
pub struct ServiceDag {
    pub names: Vec<String>,
    pub edges: Vec<(usize, usize)>,
    pub capacity: Vec<f64>,
}

impl ServiceDag {
    pub fn new(names: Vec<String>, edges: Vec<(usize, usize)>, capacity: Vec<f64>) -> Result<ServiceDag> {
        let dag = ServiceDag { names, edges, capacity };
        if dag.capacity.len() != dag.names.len() {
            return Err(Error::Structural("one capacity per node required".into()));
        }
        if dag.capacity.iter().any(|c| !(*c > 0.0)) {
            return Err(Error::Structural("capacities must be positive".into()));
        }
        if dag.edges.iter().any(|&(u, v)| u >= dag.len() || v >= dag.len()) {
            return Err(Error::Structural("edge references a missing node".into()));
        }
        dag.digraph().topo_order()?;
        Ok(dag)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn digraph(&self) -> Digraph {
        Digraph::new(self.len(), self.edges.clone())
    }

    pub fn leaves(&self) -> Vec<usize> {
        let out = self.digraph().out_degrees();
        (0..self.len()).filter(|&v| out[v] == 0).collect()
    }

    pub fn internal(&self) -> Vec<usize> {
        let out = self.digraph().out_degrees();
        (0..self.len()).filter(|&v| out[v] > 0).collect()
    }
}

/// Resource view of a pipeline: every stage depends on its inputs, so the
/// data-flow edges are reversed and the pipeline's sources become leaves.
pub fn resource_dag(template: &PipelineTemplate, capacity: f64) -> ServiceDag {
    ServiceDag {
        names: template.stages.iter().map(|s| s.stage_type.clone()).collect(),
        edges: template.edges.iter().map(|e| (e.to, e.from)).collect(),
        capacity: vec![capacity; template.len()],
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LeafSetFamily {
    /// (internal node, reachable leaves)
    pub sets: Vec<(usize, BTreeSet<usize>)>,
}

pub fn leaf_sets(dag: &ServiceDag) -> Result<LeafSetFamily> {
    let reach = dag.digraph().reachability()?;
    let leaves = dag.leaves();
    let sets =
        dag.internal().into_iter().map(|v| (v, leaves.iter().copied().filter(|&l| reach[v][l]).collect())).collect();
    Ok(LeafSetFamily { sets })
}

pub type CrossingPair = (BTreeSet<usize>, BTreeSet<usize>);

/// True when every pair of sets is nested or disjoint.
pub fn is_laminar(family: &LeafSetFamily) -> (bool, Option<CrossingPair>) {
    for (i, (_, a)) in family.sets.iter().enumerate() {
        for (_, b) in &family.sets[i + 1..] {
            let nested = a.is_subset(b) || b.is_subset(a);
            if !nested && !a.is_disjoint(b) {
                return (false, Some((a.clone(), b.clone())));
            }
        }
    }
    (true, None)
}

fn leaf_index(dag: &ServiceDag) -> BTreeMap<usize, usize> {
    dag.leaves().into_iter().enumerate().map(|(i, l)| (l, i)).collect()
}

fn to_mask(index: &BTreeMap<usize, usize>, s: &BTreeSet<usize>) -> Result<u64> {
    let mut m = 0u64;
    for l in s {
        let i = index.get(l).ok_or_else(|| Error::Argument(format!("node {l} is not a leaf")))?;
        m |= 1 << i;
    }
    Ok(m)
}

/// Precomputed data for repeated rank queries over leaf bitmasks.
struct RankTables {
    leaves: Vec<usize>,
    leaf_cap: Vec<f64>,
    internal: Vec<usize>,
    internal_mask: Vec<u64>,
    internal_cap: Vec<f64>,
    comparable: Vec<Vec<bool>>,
}

impl RankTables {
    fn new(dag: &ServiceDag) -> Result<RankTables> {
        let leaves = dag.leaves();
        if leaves.len() > 63 {
            return Err(Error::Argument("at most 63 leaves supported".into()));
        }
        let index = leaf_index(dag);
        let fam = leaf_sets(dag)?;
        let reach = dag.digraph().reachability()?;
        let internal: Vec<usize> = fam.sets.iter().map(|(v, _)| *v).collect();
        let internal_mask = fam.sets.iter().map(|(_, s)| to_mask(&index, s)).collect::<Result<Vec<_>>>()?;
        let comparable =
            internal.iter().map(|&a| internal.iter().map(|&b| reach[a][b] || reach[b][a]).collect()).collect();
        Ok(RankTables {
            leaf_cap: leaves.iter().map(|&l| dag.capacity[l]).collect(),
            internal_cap: internal.iter().map(|&v| dag.capacity[v]).collect(),
            leaves,
            internal,
            internal_mask,
            comparable,
        })
    }

    fn uncovered_cost(&self, s: u64, covered: u64) -> f64 {
        let rest = s & !covered;
        (0..self.leaves.len()).filter(|i| rest >> i & 1 == 1).map(|i| self.leaf_cap[i]).sum()
    }

    /// Reference rank: minimum over antichains of internal nodes, with each
    /// leaf left uncovered paying its own capacity.
    fn brute(&self, s: u64) -> f64 {
        let k = self.internal.len();
        let mut best = self.uncovered_cost(s, 0);
        for sub in 1u64..(1u64 << k) {
            let members: Vec<usize> = (0..k).filter(|i| sub >> i & 1 == 1).collect();
            let antichain =
                members.iter().enumerate().all(|(x, &a)| members[x + 1..].iter().all(|&b| !self.comparable[a][b]));
            if !antichain {
                continue;
            }
            let covered = members.iter().fold(0u64, |m, &i| m | self.internal_mask[i]);
            let cost: f64 =
                members.iter().map(|&i| self.internal_cap[i]).sum::<f64>() + self.uncovered_cost(s, covered);
            if cost < best {
                best = cost;
            }
        }
        best
    }
}

/// Containment forest over the distinct leaf sets of a laminar family, with
/// every leaf present as a singleton set.
struct LaminarForest {
    masks: Vec<u64>,
    caps: Vec<f64>,
    children: Vec<Vec<usize>>,
    roots: Vec<usize>,
}

impl LaminarForest {
    fn new(t: &RankTables) -> LaminarForest {
        let mut by_mask: BTreeMap<u64, f64> = BTreeMap::new();
        for (i, &c) in t.leaf_cap.iter().enumerate() {
            by_mask.insert(1 << i, c);
        }
        for (m, &c) in t.internal_mask.iter().zip(&t.internal_cap) {
            let e = by_mask.entry(*m).or_insert(c);
            if c < *e {
                *e = c;
            }
        }
        let masks: Vec<u64> = by_mask.keys().copied().collect();
        let caps: Vec<f64> = by_mask.values().copied().collect();
        let n = masks.len();
        let mut parent = vec![None; n];
        for i in 0..n {
            let mut best: Option<usize> = None;
            for j in 0..n {
                let strict_super = i != j && masks[i] & masks[j] == masks[i] && masks[i] != masks[j];
                if strict_super && best.is_none_or(|b| masks[j].count_ones() < masks[b].count_ones()) {
                    best = Some(j);
                }
            }
            parent[i] = best;
        }
        let mut children = vec![Vec::new(); n];
        let mut roots = Vec::new();
        for i in 0..n {
            match parent[i] {
                Some(p) => children[p].push(i),
                None => roots.push(i),
            }
        }
        LaminarForest { masks, caps, children, roots }
    }

    fn rank(&self, s: u64) -> f64 {
        self.roots.iter().map(|&r| self.node_rank(r, s)).sum()
    }

    fn node_rank(&self, x: usize, s: u64) -> f64 {
        if self.masks[x] & s == 0 {
            return 0.0;
        }
        if self.children[x].is_empty() {
            return self.caps[x];
        }
        let split: f64 = self.children[x].iter().map(|&c| self.node_rank(c, s)).sum();
        split.min(self.caps[x])
    }
}

/// Brute-force antichain rank; limited to 20 internal nodes.
pub fn rank_brute_force(dag: &ServiceDag, s: &BTreeSet<usize>) -> Result<f64> {
    let t = RankTables::new(dag)?;
    if t.internal.len() > 20 {
        return Err(Error::Argument("brute-force rank limited to 20 internal nodes".into()));
    }
    let mask = to_mask(&leaf_index(dag), s)?;
    Ok(t.brute(mask))
}

/// Rank via the containment-forest recursion; requires a laminar family.
pub fn rank_laminar(dag: &ServiceDag, s: &BTreeSet<usize>) -> Result<f64> {
    let t = RankTables::new(dag)?;
    let (laminar, _) = is_laminar(&leaf_sets(dag)?);
    if !laminar {
        return Err(Error::Argument("fast rank path needs a laminar leaf-set family".into()));
    }
    let mask = to_mask(&leaf_index(dag), s)?;
    Ok(LaminarForest::new(&t).rank(mask))
}

/// Polymatroid rank f(S): fast path when laminar, brute force otherwise.
pub fn rank(dag: &ServiceDag, s: &BTreeSet<usize>) -> Result<f64> {
    if is_laminar(&leaf_sets(dag)?).0 {
        rank_laminar(dag, s)
    } else {
        rank_brute_force(dag, s)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AllocationVector {
    pub x: BTreeMap<usize, f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GovernanceBounds {
    pub u: BTreeMap<usize, f64>,
}

const FEAS_TOL: f64 = 1e-9;

pub fn is_feasible(x: &AllocationVector, dag: &ServiceDag, bounds: &GovernanceBounds) -> Result<bool> {
    let leaves = dag.leaves();
    let keys: Vec<usize> = x.x.keys().copied().collect();
    if keys != leaves {
        return Err(Error::Argument("allocation must cover exactly the leaves".into()));
    }
    if x.x.values().any(|v| !(*v >= 0.0)) {
        return Ok(false);
    }
    for (&l, &v) in &x.x {
        if v > dag.capacity[l] + FEAS_TOL {
            return Ok(false);
        }
        if let Some(&u) = bounds.u.get(&l) {
            if v > u + FEAS_TOL {
                return Ok(false);
            }
        }
    }
    for (v, set) in leaf_sets(dag)?.sets {
        let load: f64 = set.iter().map(|l| x.x[l]).sum();
        if load > dag.capacity[v] + FEAS_TOL {
            return Ok(false);
        }
    }
    Ok(true)
}

#[derive(Clone, Debug, PartialEq)]
pub struct StructureReport {
    pub laminar: bool,
    pub witness: Option<CrossingPair>,
    pub submodular: bool,
    /// Number of violating (S, T) pairs among those checked.
    pub gamma: usize,
    pub max_violation: f64,
    pub pairs_checked: usize,
    pub exhaustive: bool,
}

const SUBMOD_TOL: f64 = 1e-9;

/// Checks f(S) + f(T) >= f(S ∪ T) + f(S ∩ T): every pair when |L| <= 12,
/// otherwise `sample_budget` random pairs.
pub fn check_submodular(dag: &ServiceDag, sample_budget: usize, rng_seed: u64) -> Result<StructureReport> {
    let (laminar, witness) = is_laminar(&leaf_sets(dag)?);
    let t = RankTables::new(dag)?;
    let n = t.leaves.len();
    let forest = laminar.then(|| LaminarForest::new(&t));
    let f = |m: u64| match &forest {
        Some(fr) => fr.rank(m),
        None => t.brute(m),
    };
    let mut gamma = 0;
    let mut max_violation = 0.0f64;
    let mut checked = 0;
    let mut record = |fs: f64, ft: f64, fu: f64, fi: f64| {
        let v = fu + fi - fs - ft;
        if v > SUBMOD_TOL {
            gamma += 1;
            max_violation = max_violation.max(v);
        }
    };
    let exhaustive = n <= 12;
    if exhaustive {
        let table: Vec<f64> = (0..1u64 << n).map(f).collect();
        for s in 0..1usize << n {
            for u in s..1usize << n {
                record(table[s], table[u], table[s | u], table[s & u]);
                checked += 1;
            }
        }
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let full = if n == 64 { u64::MAX } else { (1u64 << n) - 1 };
        for _ in 0..sample_budget {
            let s = rng.gen::<u64>() & full;
            let u = rng.gen::<u64>() & full;
            record(f(s), f(u), f(s | u), f(s & u));
            checked += 1;
        }
    }
    Ok(StructureReport {
        laminar,
        witness,
        submodular: gamma == 0,
        gamma,
        max_violation,
        pairs_checked: checked,
        exhaustive,
    })
}

/// Directed graph with arc capacities.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowNetwork {
    pub n: usize,
    pub arcs: Vec<(usize, usize, f64)>,
}

/// Shortest-augmenting-path (Edmonds-Karp) max-flow.
pub fn max_flow(g: &FlowNetwork, source: usize, sink: usize) -> Result<f64> {
    if source == sink || source >= g.n || sink >= g.n {
        return Err(Error::Argument("source and sink must be distinct nodes".into()));
    }
    if g.arcs.iter().any(|a| !(a.2 >= 0.0)) {
        return Err(Error::Argument("capacities must be nonnegative".into()));
    }
    // Residual arcs stored pairwise: arc 2i forward, 2i+1 reverse.
    let mut to = Vec::with_capacity(g.arcs.len() * 2);
    let mut cap = Vec::with_capacity(g.arcs.len() * 2);
    let mut adj = vec![Vec::new(); g.n];
    for &(u, v, c) in &g.arcs {
        adj[u].push(to.len());
        to.push(v);
        cap.push(c);
        adj[v].push(to.len());
        to.push(u);
        cap.push(0.0);
    }
    let mut total = 0.0;
    loop {
        let mut via = vec![usize::MAX; g.n];
        let mut seen = vec![false; g.n];
        seen[source] = true;
        let mut queue = VecDeque::from([source]);
        while let Some(u) = queue.pop_front() {
            for &a in &adj[u] {
                let v = to[a];
                if !seen[v] && cap[a] > 1e-12 {
                    seen[v] = true;
                    via[v] = a;
                    queue.push_back(v);
                }
            }
        }
        if !seen[sink] {
            return Ok(total);
        }
        let mut bottleneck = f64::INFINITY;
        let mut v = sink;
        while v != source {
            let a = via[v];
            bottleneck = bottleneck.min(cap[a]);
            v = to[a ^ 1];
        }
        if bottleneck.is_infinite() {
            return Ok(f64::INFINITY);
        }
        let mut v = sink;
        while v != source {
            let a = via[v];
            cap[a] -= bottleneck;
            cap[a ^ 1] += bottleneck;
            v = to[a ^ 1];
        }
        total += bottleneck;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IntegratorView {
    pub partition: Vec<DomainId>,
    pub quotient_nodes: Vec<DomainId>,
    pub quotient_edges: Vec<(DomainId, DomainId)>,
    pub composite_capacity: BTreeMap<DomainId, f64>,
}

impl IntegratorView {
    /// Quotient as a digraph over positions in `quotient_nodes`.
    pub fn quotient_digraph(&self) -> Digraph {
        let pos = |d: DomainId| self.quotient_nodes.iter().position(|&q| q == d).expect("quotient node");
        Digraph::new(self.quotient_nodes.len(), self.quotient_edges.iter().map(|&(a, b)| (pos(a), pos(b))).collect())
    }
}

/// Contracts every partition class to one composite node whose capacity is
/// the max-flow through the class between its boundary entries and exits.
pub fn encapsulate(dag: &ServiceDag, partition: &[DomainId]) -> Result<IntegratorView> {
    if partition.len() != dag.len() {
        return Err(Error::Argument("partition must label every node".into()));
    }
    let g = dag.digraph();
    let classes: BTreeSet<DomainId> = partition.iter().copied().collect();
    let indeg = g.in_degrees();
    let outdeg = g.out_degrees();
    let mut composite_capacity = BTreeMap::new();
    for &d in &classes {
        let members: Vec<usize> = (0..dag.len()).filter(|&v| partition[v] == d).collect();
        if !g.weakly_connected(&members) {
            return Err(Error::Structural(format!("partition class {d} is not connected")));
        }
        // Node-split network: v_in = 2i, v_out = 2i+1, then super-source and super-sink.
        let k = members.len();
        let (ss, tt) = (2 * k, 2 * k + 1);
        let local = |v: usize| members.iter().position(|&m| m == v);
        let mut arcs = Vec::new();
        for (i, &v) in members.iter().enumerate() {
            arcs.push((2 * i, 2 * i + 1, dag.capacity[v]));
            let entry = indeg[v] == 0 || g.edges.iter().any(|&(a, b)| b == v && partition[a] != d);
            let exit = outdeg[v] == 0 || g.edges.iter().any(|&(a, b)| a == v && partition[b] != d);
            if entry {
                arcs.push((ss, 2 * i, f64::INFINITY));
            }
            if exit {
                arcs.push((2 * i + 1, tt, f64::INFINITY));
            }
        }
        for &(a, b) in &g.edges {
            if let (Some(i), Some(j)) = (local(a), local(b)) {
                arcs.push((2 * i + 1, 2 * j, f64::INFINITY));
            }
        }
        let value = max_flow(&FlowNetwork { n: 2 * k + 2, arcs }, ss, tt)?;
        composite_capacity.insert(d, value);
    }
    let quotient_edges: BTreeSet<(DomainId, DomainId)> = g
        .edges
        .iter()
        .filter(|&&(a, b)| partition[a] != partition[b])
        .map(|&(a, b)| (partition[a], partition[b]))
        .collect();
    Ok(IntegratorView {
        partition: partition.to_vec(),
        quotient_nodes: classes.into_iter().collect(),
        quotient_edges: quotient_edges.into_iter().collect(),
        composite_capacity,
    })
}

/// Splits each home domain into its weakly connected components so that every
/// class is connected (needed where parallel sources share a domain).
pub fn component_partition(template: &PipelineTemplate) -> Vec<DomainId> {
    let g = template.digraph();
    let mut label = vec![usize::MAX; template.len()];
    let mut next = 0;
    for v in 0..template.len() {
        if label[v] != usize::MAX {
            continue;
        }
        let home = template.stages[v].home_domain;
        let mut stack = vec![v];
        label[v] = next;
        while let Some(u) = stack.pop() {
            for &(a, b) in &g.edges {
                let other = if a == u {
                    b
                } else if b == u {
                    a
                } else {
                    continue;
                };
                if label[other] == usize::MAX && template.stages[other].home_domain == home {
                    label[other] = next;
                    stack.push(other);
                }
            }
        }
        next += 1;
    }
    label
}
