//! Pipeline templates, topological ordering and tree / series-parallel recognition.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::topology::{DomainId, Slice, StageId, DEFAULT_BASE_BID};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Sovereignty {
    Free,
    LocalOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub stage_id: StageId,
    pub stage_type: String,
    pub demand: f64,
    pub output_rate: f64,
    pub home_domain: DomainId,
    pub slice: Slice,
    pub sovereignty: Sovereignty,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageEdge {
    pub from: StageId,
    pub to: StageId,
    pub latency_bound: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PipelineKind {
    CqiChain,
    AnomalySp,
    RanEntangled,
}

impl PipelineKind {
    pub const ALL: [PipelineKind; 3] = [PipelineKind::CqiChain, PipelineKind::AnomalySp, PipelineKind::RanEntangled];

    pub fn name(self) -> &'static str {
        match self {
            PipelineKind::CqiChain => "cqi-chain",
            PipelineKind::AnomalySp => "anomaly-sp",
            PipelineKind::RanEntangled => "ran-entangled",
        }
    }

    pub fn parse(s: &str) -> Result<PipelineKind> {
        PipelineKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown pipeline kind '{s}'")))
    }
}

impl fmt::Display for PipelineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineTemplate {
    pub name: String,
    /// Built-in kind, `None` for pipelines defined in a scenario file.
    pub kind: Option<PipelineKind>,
    pub stages: Vec<StageSpec>,
    pub edges: Vec<StageEdge>,
    pub value_budget: f64,
}

/// Uniform per-stage demand shared by all built-in templates.
pub const STAGE_DEMAND: f64 = 1.0;
pub const STAGE_OUTPUT_RATE: f64 = 1.0;
/// Eight stages at ten times the uncongested base bid.
pub const DEFAULT_VALUE_BUDGET: f64 = 8.0 * 10.0 * DEFAULT_BASE_BID;

impl PipelineTemplate {
    pub fn new(
        name: impl Into<String>,
        stages: Vec<StageSpec>,
        edges: Vec<StageEdge>,
        value_budget: f64,
    ) -> Result<PipelineTemplate> {
        let t = PipelineTemplate { name: name.into(), kind: None, stages, edges, value_budget };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, s) in self.stages.iter().enumerate() {
            if s.stage_id != i {
                return Err(Error::Structural(format!("stage ids must be 0..n in order, got {}", s.stage_id)));
            }
            if !(s.demand > 0.0) || !(s.output_rate >= 0.0) {
                return Err(Error::Structural(format!("stage {i} needs demand > 0 and output rate >= 0")));
            }
        }
        for e in &self.edges {
            if e.from >= self.stages.len() || e.to >= self.stages.len() {
                return Err(Error::Structural(format!("edge {}->{} references a missing stage", e.from, e.to)));
            }
            if matches!(e.latency_bound, Some(b) if !(b > 0.0)) {
                return Err(Error::Structural("latency bound must be positive".into()));
            }
        }
        if !(self.value_budget > 0.0) {
            return Err(Error::Structural("value budget must be positive".into()));
        }
        self.digraph().topo_order().map(|_| ())
    }

    pub fn len(&self) -> usize {
        self.stages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }

    pub fn digraph(&self) -> Digraph {
        Digraph::new(self.stages.len(), self.edges.iter().map(|e| (e.from, e.to)).collect())
    }

    pub fn preds(&self, v: StageId) -> impl Iterator<Item = StageId> + '_ {
        self.edges.iter().filter(move |e| e.to == v).map(|e| e.from)
    }

    pub fn succs(&self, v: StageId) -> impl Iterator<Item = StageId> + '_ {
        self.edges.iter().filter(move |e| e.from == v).map(|e| e.to)
    }

    pub fn is_source(&self, v: StageId) -> bool {
        self.preds(v).next().is_none()
    }

    pub fn is_sink(&self, v: StageId) -> bool {
        self.succs(v).next().is_none()
    }
}

/// Plain directed graph on nodes `0..n`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Digraph {
    pub n: usize,
    pub edges: Vec<(usize, usize)>,
}

impl Digraph {
    pub fn new(n: usize, edges: Vec<(usize, usize)>) -> Digraph {
        Digraph { n, edges }
    }

    pub fn in_degrees(&self) -> Vec<usize> {
        let mut d = vec![0; self.n];
        for &(_, v) in &self.edges {
            d[v] += 1;
        }
        d
    }

    pub fn out_degrees(&self) -> Vec<usize> {
        let mut d = vec![0; self.n];
        for &(u, _) in &self.edges {
            d[u] += 1;
        }
        d
    }

    pub fn children(&self) -> Vec<Vec<usize>> {
        let mut c = vec![Vec::new(); self.n];
        for &(u, v) in &self.edges {
            c[u].push(v);
        }
        c
    }

    /// Kahn's algorithm, taking the smallest ready id first.
    pub fn topo_order(&self) -> Result<Vec<usize>> {
        let mut indeg = self.in_degrees();
        let children = self.children();
        let mut ready: BinaryHeap<Reverse<usize>> = (0..self.n).filter(|&v| indeg[v] == 0).map(Reverse).collect();
        let mut order = Vec::with_capacity(self.n);
        while let Some(Reverse(v)) = ready.pop() {
            order.push(v);
            for &c in &children[v] {
                indeg[c] -= 1;
                if indeg[c] == 0 {
                    ready.push(Reverse(c));
                }
            }
        }
        if order.len() != self.n {
            return Err(Error::Structural("cycle detected".into()));
        }
        Ok(order)
    }

    /// reach[u][v] is true when a directed path leads from u to v (u != v).
    pub fn reachability(&self) -> Result<Vec<Vec<bool>>> {
        let order = self.topo_order()?;
        let children = self.children();
        let mut reach = vec![vec![false; self.n]; self.n];
        for &u in order.iter().rev() {
            for &c in &children[u] {
                reach[u][c] = true;
                for w in 0..self.n {
                    if reach[c][w] {
                        reach[u][w] = true;
                    }
                }
            }
        }
        Ok(reach)
    }

    /// Weak connectivity of the subgraph induced by `members`.
    pub fn weakly_connected(&self, members: &[usize]) -> bool {
        if members.len() <= 1 {
            return true;
        }
        let inside = |v: usize| members.contains(&v);
        let mut seen = vec![members[0]];
        let mut stack = vec![members[0]];
        while let Some(u) = stack.pop() {
            for &(a, b) in &self.edges {
                let next = if a == u && inside(b) {
                    b
                } else if b == u && inside(a) {
                    a
                } else {
                    continue;
                };
                if !seen.contains(&next) {
                    seen.push(next);
                    stack.push(next);
                }
            }
        }
        seen.len() == members.len()
    }
}

pub fn topo_order(template: &PipelineTemplate) -> Result<Vec<StageId>> {
    template.digraph().topo_order()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Structure {
    Tree,
    SeriesParallel,
    General,
}

/// Binary SP decomposition. Leaves are graph edges; `virtual_edge` marks
/// edges to or from an added super-terminal.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ParseTree {
    Edge { from: usize, to: usize, virtual_edge: bool },
    Series(Box<ParseTree>, Box<ParseTree>),
    Parallel(Box<ParseTree>, Box<ParseTree>),
}

impl ParseTree {
    /// Real (non-virtual) leaf edges, sorted.
    pub fn real_edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        self.collect(&mut out);
        out.sort_unstable();
        out
    }

    fn collect(&self, out: &mut Vec<(usize, usize)>) {
        match self {
            ParseTree::Edge { from, to, virtual_edge } => {
                if !virtual_edge {
                    out.push((*from, *to));
                }
            }
            ParseTree::Series(a, b) | ParseTree::Parallel(a, b) => {
                a.collect(out);
                b.collect(out);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StructureClass {
    pub class: Structure,
    pub parse_tree: Option<ParseTree>,
}

/// Tree when every node has at most one parent; series-parallel when
/// series/parallel reduction collapses the (terminal-augmented) graph to a
/// single edge; general otherwise.
pub fn classify_structure(g: &Digraph) -> StructureClass {
    let parse_tree = sp_reduce(g);
    let class = if g.in_degrees().iter().all(|&d| d <= 1) {
        Structure::Tree
    } else if parse_tree.is_some() {
        Structure::SeriesParallel
    } else {
        Structure::General
    };
    StructureClass { class, parse_tree: if class == Structure::General { None } else { parse_tree } }
}

fn sp_reduce(g: &Digraph) -> Option<ParseTree> {
    if g.edges.is_empty() {
        return None;
    }
    let indeg = g.in_degrees();
    let outdeg = g.out_degrees();
    let sources: Vec<usize> = (0..g.n).filter(|&v| indeg[v] == 0).collect();
    let sinks: Vec<usize> = (0..g.n).filter(|&v| outdeg[v] == 0).collect();
    let mut edges: Vec<(usize, usize, ParseTree)> =
        g.edges.iter().map(|&(u, v)| (u, v, ParseTree::Edge { from: u, to: v, virtual_edge: false })).collect();
    let (s, t);
    let mut next_id = g.n;
    if sources.len() == 1 {
        s = sources[0];
    } else {
        s = next_id;
        next_id += 1;
        for &v in &sources {
            edges.push((s, v, ParseTree::Edge { from: s, to: v, virtual_edge: true }));
        }
    }
    if sinks.len() == 1 {
        t = sinks[0];
    } else {
        t = next_id;
        for &v in &sinks {
            edges.push((v, t, ParseTree::Edge { from: v, to: t, virtual_edge: true }));
        }
    }

    loop {
        let mut changed = false;
        // Parallel reduction: merge edges sharing both endpoints.
        let mut grouped: BTreeMap<(usize, usize), ParseTree> = BTreeMap::new();
        for (u, v, tree) in edges.drain(..) {
            match grouped.remove(&(u, v)) {
                Some(prev) => {
                    changed = true;
                    grouped.insert((u, v), ParseTree::Parallel(Box::new(prev), Box::new(tree)));
                }
                None => {
                    grouped.insert((u, v), tree);
                }
            }
        }
        edges = grouped.into_iter().map(|((u, v), tree)| (u, v, tree)).collect();

        // Series reduction on the first eligible inner node.
        let mut node_in: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        let mut node_out: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, (u, v, _)) in edges.iter().enumerate() {
            node_out.entry(*u).or_default().push(i);
            node_in.entry(*v).or_default().push(i);
        }
        let candidate = node_in.iter().find_map(|(&x, ins)| {
            let outs = node_out.get(&x)?;
            (x != s && x != t && ins.len() == 1 && outs.len() == 1).then(|| (ins[0], outs[0]))
        });
        if let Some((i_in, i_out)) = candidate {
            let (hi, lo) = if i_in > i_out { (i_in, i_out) } else { (i_out, i_in) };
            let e_hi = edges.remove(hi);
            let e_lo = edges.remove(lo);
            let (first, second) = if i_in < i_out { (e_lo, e_hi) } else { (e_hi, e_lo) };
            edges.push((first.0, second.1, ParseTree::Series(Box::new(first.2), Box::new(second.2))));
            changed = true;
        }
        if !changed {
            break;
        }
    }
    if edges.len() == 1 && edges[0].0 == s && edges[0].1 == t {
        edges.pop().map(|e| e.2)
    } else {
        None
    }
}

fn stage(id: StageId, ty: &str, home: DomainId, slice: Slice) -> StageSpec {
    StageSpec {
        stage_id: id,
        stage_type: ty.to_string(),
        demand: STAGE_DEMAND,
        output_rate: STAGE_OUTPUT_RATE,
        home_domain: home,
        slice,
        sovereignty: Sovereignty::Free,
    }
}

fn edges(list: &[(StageId, StageId)]) -> Vec<StageEdge> {
    list.iter().map(|&(from, to)| StageEdge { from, to, latency_bound: None }).collect()
}

/// Template registry, version 1. Stage type strings are part of the CSV contract.
pub const TEMPLATE_REGISTRY_VERSION: u32 = 1;

pub fn build_template(kind: PipelineKind) -> PipelineTemplate {
    use Slice::{BestEffort as B, Embb as E};
    let (stages, edge_list): (Vec<StageSpec>, Vec<(usize, usize)>) = match kind {
        PipelineKind::CqiChain => (
            vec![
                stage(0, "DU:raw_cqi", 0, E),
                stage(1, "DU:denoise", 0, E),
                stage(2, "CU:normalise", 1, E),
                stage(3, "CU:feature_extract", 1, E),
                stage(4, "RIC:predict", 1, E),
                stage(5, "RIC:validate", 1, E),
                stage(6, "nRT:aggregate", 2, B),
                stage(7, "SMO:report", 3, B),
            ],
            (0..7).map(|i| (i, i + 1)).collect(),
        ),
        PipelineKind::AnomalySp => (
            vec![
                stage(0, "DU:cqi_monitor", 0, E),
                stage(1, "DU:harq_monitor", 0, E),
                stage(2, "CU:pdcp_monitor", 1, E),
                stage(3, "CU:rrc_monitor", 1, E),
                stage(4, "RIC:fuse", 1, E),
                stage(5, "RIC:classify", 1, E),
                stage(6, "RIC:alert", 1, E),
                stage(7, "RIC:log", 1, B),
            ],
            vec![(0, 4), (1, 4), (2, 4), (3, 4), (4, 5), (5, 6), (6, 7)],
        ),
        PipelineKind::RanEntangled => (
            vec![
                stage(0, "DU:raw_cqi", 0, E),
                stage(1, "CU:feature_extract", 1, E),
                stage(2, "CU:pdcp_stats", 1, E),
                stage(3, "CU:rrc_events", 1, E),
                stage(4, "RIC:cqi_predict", 1, E),
                stage(5, "RIC:anomaly_detect", 1, E),
                stage(6, "nRT:policy_context", 2, B),
                stage(7, "SMO:handover_optimise", 3, B),
            ],
            vec![(0, 1), (0, 4), (1, 4), (1, 5), (2, 4), (2, 7), (3, 5), (4, 7), (5, 7), (6, 7)],
        ),
    };
    PipelineTemplate {
        name: kind.name().to_string(),
        kind: Some(kind),
        stages,
        edges: edges(&edge_list),
        value_budget: DEFAULT_VALUE_BUDGET,
    }
}

/// Every stage type known to the built-in registry, with its slice.
pub fn stage_type_registry() -> Vec<(String, Slice)> {
    let mut all: BTreeMap<String, Slice> = BTreeMap::new();
    for kind in PipelineKind::ALL {
        for s in build_template(kind).stages {
            all.insert(s.stage_type, s.slice);
        }
    }
    all.into_iter().collect()
}
