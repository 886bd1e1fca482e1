//! Problem-instance data model, validation and the spanning-tree machinery.

use std::collections::{HashMap, HashSet, VecDeque};
use std::fmt;

use thiserror::Error;

use crate::models::{EdgeModel, SideConstraint};

pub type NodeIx = usize;
pub type EdgeIx = usize;

/// Closed interval `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bounds {
    pub lo: f64,
    pub hi: f64,
}

impl Bounds {
    pub fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn point(value: f64) -> Self {
        Self { lo: value, hi: value }
    }

    pub fn is_ordered(&self) -> bool {
        self.lo <= self.hi
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }

    /// Distance from `v` to the interval, zero inside.
    pub fn excess(&self, v: f64) -> f64 {
        if v < self.lo {
            self.lo - v
        } else if v > self.hi {
            v - self.hi
        } else {
            0.0
        }
    }

    pub fn clamp(&self, v: f64) -> f64 {
        v.max(self.lo).min(self.hi)
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    pub fn intersect(&self, other: &Bounds) -> Bounds {
        Bounds::new(self.lo.max(other.lo), self.hi.min(other.hi))
    }
}

/// Node objective term `F_i = a Q_i + b p_i`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct NodeCost {
    pub per_intensity: f64,
    pub per_potential: f64,
}

/// Edge objective term: `per_flow abs(q) + param_energy sum(c_j^2)` plus the
/// selected model's fixed cost.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EdgeCost {
    pub per_flow: f64,
    pub param_energy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeSpec {
    pub id: String,
    /// `[Q^-, Q^+]`; supply is positive, demand negative.
    pub intensity: Bounds,
    /// `[p^-, p^+]`, strictly positive.
    pub potential: Bounds,
    pub cost: NodeCost,
}

impl NodeSpec {
    pub fn new(id: impl Into<String>, intensity: Bounds, potential: Bounds) -> Self {
        Self { id: id.into(), intensity, potential, cost: NodeCost::default() }
    }

    pub fn with_cost(mut self, cost: NodeCost) -> Self {
        self.cost = cost;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdgeSpec {
    pub id: String,
    pub from: String,
    pub to: String,
    /// Model family, selected 1-based by the discrete choice `d`.
    pub models: Vec<EdgeModel>,
    pub side_constraints: Vec<SideConstraint>,
    pub cost: EdgeCost,
}

impl EdgeSpec {
    pub fn new(id: impl Into<String>, from: impl Into<String>, to: impl Into<String>, models: Vec<EdgeModel>) -> Self {
        Self {
            id: id.into(),
            from: from.into(),
            to: to.into(),
            models,
            side_constraints: Vec::new(),
            cost: EdgeCost::default(),
        }
    }

    pub fn with_side_constraint(mut self, sc: SideConstraint) -> Self {
        self.side_constraints.push(sc);
        self
    }

    pub fn with_cost(mut self, cost: EdgeCost) -> Self {
        self.cost = cost;
        self
    }

    /// `N_ik`.
    pub fn arity(&self) -> usize {
        self.models.len()
    }

    /// Model for the 1-based choice `d`.
    pub fn model(&self, d: usize) -> Option<&EdgeModel> {
        d.checked_sub(1).and_then(|i| self.models.get(i))
    }
}

/// Static problem instance. Immutable after construction; endpoint ids are
/// resolved eagerly but unresolved ones are only reported by
/// [`validate_network`].
#[derive(Debug, Clone)]
pub struct Network {
    nodes: Vec<NodeSpec>,
    edges: Vec<EdgeSpec>,
    root: String,
    node_lookup: HashMap<String, NodeIx>,
    edge_lookup: HashMap<String, EdgeIx>,
    ends: Vec<Option<(NodeIx, NodeIx)>>,
}

impl PartialEq for Network {
    fn eq(&self, other: &Self) -> bool {
        self.nodes == other.nodes && self.edges == other.edges && self.root == other.root
    }
}

impl Network {
    pub fn new(nodes: Vec<NodeSpec>, edges: Vec<EdgeSpec>, root: impl Into<String>) -> Self {
        let mut node_lookup = HashMap::new();
        for (i, n) in nodes.iter().enumerate() {
            node_lookup.entry(n.id.clone()).or_insert(i);
        }
        let mut edge_lookup = HashMap::new();
        for (i, e) in edges.iter().enumerate() {
            edge_lookup.entry(e.id.clone()).or_insert(i);
        }
        let ends = edges
            .iter()
            .map(|e| Some((*node_lookup.get(&e.from)?, *node_lookup.get(&e.to)?)))
            .collect();
        Self { nodes, edges, root: root.into(), node_lookup, edge_lookup, ends }
    }

    pub fn nodes(&self) -> &[NodeSpec] {
        &self.nodes
    }

    pub fn edges(&self) -> &[EdgeSpec] {
        &self.edges
    }

    pub fn node(&self, ix: NodeIx) -> &NodeSpec {
        &self.nodes[ix]
    }

    pub fn edge(&self, ix: EdgeIx) -> &EdgeSpec {
        &self.edges[ix]
    }

    pub fn root_id(&self) -> &str {
        &self.root
    }

    pub fn root(&self) -> Option<NodeIx> {
        self.node_index(&self.root)
    }

    pub fn node_index(&self, id: &str) -> Option<NodeIx> {
        self.node_lookup.get(id).copied()
    }

    pub fn edge_index(&self, id: &str) -> Option<EdgeIx> {
        self.edge_lookup.get(id).copied()
    }

    /// `(from, to)` node indices of an edge.
    ///
    /// Panics if an endpoint is unknown; only call on validated networks.
    pub fn ends(&self, e: EdgeIx) -> (NodeIx, NodeIx) {
        self.ends[e].unwrap_or_else(|| panic!("edge {} has an unresolved endpoint", self.edges[e].id))
    }

    pub fn with_root(&self, root: impl Into<String>) -> Network {
        Network::new(self.nodes.clone(), self.edges.clone(), root)
    }

    /// Decomposes into `(nodes, edges, root)` for building a modified copy.
    pub fn to_parts(&self) -> (Vec<NodeSpec>, Vec<EdgeSpec>, String) {
        (self.nodes.clone(), self.edges.clone(), self.root.clone())
    }

    /// Edge indices sorted by edge id.
    pub fn edges_by_id(&self) -> Vec<EdgeIx> {
        let mut order: Vec<EdgeIx> = (0..self.edges.len()).collect();
        order.sort_by(|&a, &b| self.edges[a].id.cmp(&self.edges[b].id).then(a.cmp(&b)));
        order
    }

    /// Incident `(edge, neighbour)` pairs per node, each list in edge-id order.
    pub(crate) fn adjacency(&self) -> Vec<Vec<(EdgeIx, NodeIx)>> {
        let mut adj = vec![Vec::new(); self.nodes.len()];
        for e in self.edges_by_id() {
            if let Some((a, b)) = self.ends[e] {
                adj[a].push((e, b));
                if a != b {
                    adj[b].push((e, a));
                }
            }
        }
        adj
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IssueKind {
    UnknownEndpoint,
    UnknownRoot,
    DuplicateId,
    EmptyModelFamily,
    InvertedBounds,
    NonPositivePotential,
    SelfLoop,
    InvalidModel,
    Disconnected,
}

impl IssueKind {
    pub fn label(&self) -> &'static str {
        match self {
            IssueKind::UnknownEndpoint => "unknown endpoint",
            IssueKind::UnknownRoot => "unknown root",
            IssueKind::DuplicateId => "duplicate id",
            IssueKind::EmptyModelFamily => "empty model family",
            IssueKind::InvertedBounds => "inverted bounds",
            IssueKind::NonPositivePotential => "non-positive potential bound",
            IssueKind::SelfLoop => "self loop",
            IssueKind::InvalidModel => "invalid model",
            IssueKind::Disconnected => "disconnected",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationIssue {
    pub kind: IssueKind,
    /// Path of the offending item, e.g. `edges[e23].to`.
    pub subject: String,
    pub detail: String,
}

impl fmt::Display for ValidationIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.subject, self.kind.label())?;
        if !self.detail.is_empty() {
            write!(f, " ({})", self.detail)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub issues: Vec<ValidationIssue>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.issues.is_empty()
    }

    pub fn contains(&self, kind: IssueKind) -> bool {
        self.issues.iter().any(|i| i.kind == kind)
    }

    fn push(&mut self, kind: IssueKind, subject: impl Into<String>, detail: impl Into<String>) {
        self.issues.push(ValidationIssue { kind, subject: subject.into(), detail: detail.into() });
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, issue) in self.issues.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{issue}")?;
        }
        Ok(())
    }
}

/// Lists every structural problem of the instance; empty iff well-formed.
pub fn validate_network(net: &Network) -> ValidationReport {
    let mut report = ValidationReport::default();

    let mut seen = HashSet::new();
    for n in &net.nodes {
        let subject = format!("nodes[{}]", n.id);
        if !seen.insert(n.id.as_str()) {
            report.push(IssueKind::DuplicateId, &subject, "node id used more than once");
        }
        if !n.intensity.is_ordered() {
            report.push(IssueKind::InvertedBounds, format!("{subject}.intensity"), format!("[{}, {}]", n.intensity.lo, n.intensity.hi));
        }
        if !n.potential.is_ordered() {
            report.push(IssueKind::InvertedBounds, format!("{subject}.potential"), format!("[{}, {}]", n.potential.lo, n.potential.hi));
        }
        if !(n.potential.lo > 0.0) {
            report.push(IssueKind::NonPositivePotential, format!("{subject}.potential"), format!("lower bound {}", n.potential.lo));
        }
    }

    let mut seen = HashSet::new();
    for e in &net.edges {
        let subject = format!("edges[{}]", e.id);
        if !seen.insert(e.id.as_str()) {
            report.push(IssueKind::DuplicateId, &subject, "edge id used more than once");
        }
        for (end, id) in [("from", &e.from), ("to", &e.to)] {
            if net.node_index(id).is_none() {
                report.push(IssueKind::UnknownEndpoint, format!("{subject}.{end}"), format!("no node '{id}'"));
            }
        }
        if e.from == e.to {
            report.push(IssueKind::SelfLoop, &subject, format!("both ends at '{}'", e.from));
        }
        if e.models.is_empty() {
            report.push(IssueKind::EmptyModelFamily, format!("{subject}.models"), "");
        }
        for (d, m) in e.models.iter().enumerate() {
            if let Err(msg) = m.check() {
                report.push(IssueKind::InvalidModel, format!("{subject}.models[{}]", d + 1), msg);
            }
        }
        for (j, sc) in e.side_constraints.iter().enumerate() {
            if !sc.bounds.is_ordered() {
                report.push(
                    IssueKind::InvertedBounds,
                    format!("{subject}.side_constraints[{j}]"),
                    format!("[{}, {}]", sc.bounds.lo, sc.bounds.hi),
                );
            }
        }
    }

    if net.root().is_none() {
        report.push(IssueKind::UnknownRoot, "root", format!("no node '{}'", net.root));
    }

    if !net.nodes.is_empty() {
        let adj = net.adjacency();
        let start = net.root().unwrap_or(0);
        let reached = reachable(&adj, start);
        if reached.iter().any(|r| !r) {
            let missing: Vec<&str> = net
                .nodes
                .iter()
                .zip(&reached)
                .filter(|(_, r)| !**r)
                .map(|(n, _)| n.id.as_str())
                .collect();
            report.push(IssueKind::Disconnected, "network", format!("unreachable: {}", missing.join(", ")));
        }
    }
    report
}

fn reachable(adj: &[Vec<(EdgeIx, NodeIx)>], start: NodeIx) -> Vec<bool> {
    let mut seen = vec![false; adj.len()];
    let mut stack = vec![start];
    seen[start] = true;
    while let Some(u) = stack.pop() {
        for &(_, v) in &adj[u] {
            if !seen[v] {
                seen[v] = true;
                stack.push(v);
            }
        }
    }
    seen
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NetworkError {
    #[error("invalid network:\n{0}")]
    Invalid(ValidationReport),
    #[error("network is disconnected")]
    DisconnectedGraph,
    #[error("unknown node '{0}'")]
    UnknownNode(String),
    #[error("unknown edge index {0}")]
    UnknownEdge(EdgeIx),
}

/// Rooted spanning tree with its chords and the node order `l_p`.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeDecomposition {
    root: NodeIx,
    tree_edges: Vec<EdgeIx>,
    chords: Vec<EdgeIx>,
    node_order: Vec<NodeIx>,
    parent: Vec<Option<(NodeIx, EdgeIx)>>,
    position: Vec<usize>,
    children: Vec<Vec<(NodeIx, EdgeIx)>>,
    in_tree: Vec<bool>,
}

impl TreeDecomposition {
    pub fn root(&self) -> NodeIx {
        self.root
    }

    /// Tree edges in edge-id order.
    pub fn tree_edges(&self) -> &[EdgeIx] {
        &self.tree_edges
    }

    /// Chords in edge-id order; chord flows are indexed in this order.
    pub fn chords(&self) -> &[EdgeIx] {
        &self.chords
    }

    /// Breadth-first visit order; `node_order()[0]` is the root.
    pub fn node_order(&self) -> &[NodeIx] {
        &self.node_order
    }

    pub fn parent(&self, v: NodeIx) -> Option<(NodeIx, EdgeIx)> {
        self.parent[v]
    }

    /// Position of a node in `node_order`.
    pub fn position(&self, v: NodeIx) -> usize {
        self.position[v]
    }

    /// Tree children in edge-id order.
    pub fn children(&self, v: NodeIx) -> &[(NodeIx, EdgeIx)] {
        &self.children[v]
    }

    pub fn is_tree_edge(&self, e: EdgeIx) -> bool {
        self.in_tree[e]
    }

    /// Node at the far end of a tree edge, as seen from the root.
    pub fn child_of(&self, net: &Network, e: EdgeIx) -> Option<NodeIx> {
        if !self.in_tree[e] {
            return None;
        }
        let (a, b) = net.ends(e);
        Some(if self.parent[b].map(|(_, pe)| pe) == Some(e) { b } else { a })
    }

    /// Depth-first pre-order of the tree, children in edge-id order.
    pub fn preorder(&self) -> Vec<NodeIx> {
        let mut out = Vec::with_capacity(self.node_order.len());
        let mut stack = vec![self.root];
        while let Some(u) = stack.pop() {
            out.push(u);
            for &(v, _) in self.children[u].iter().rev() {
                stack.push(v);
            }
        }
        out
    }

    /// Nodes on the tree path from `v` up to the root, `v` first.
    pub fn path_to_root(&self, mut v: NodeIx) -> Vec<NodeIx> {
        let mut path = vec![v];
        while let Some((p, _)) = self.parent[v] {
            path.push(p);
            v = p;
        }
        path
    }
}

/// Breadth-first spanning tree from `root`, neighbours explored in ascending
/// edge-id order.
pub fn build_spanning_tree(net: &Network, root: &str) -> Result<TreeDecomposition, NetworkError> {
    let report = validate_network(net);
    let structural: Vec<_> = report
        .issues
        .iter()
        .filter(|i| !matches!(i.kind, IssueKind::Disconnected | IssueKind::UnknownRoot))
        .cloned()
        .collect();
    if !structural.is_empty() {
        return Err(NetworkError::Invalid(ValidationReport { issues: structural }));
    }
    let root = net.node_index(root).ok_or_else(|| NetworkError::UnknownNode(root.to_string()))?;

    let n = net.nodes.len();
    let adj = net.adjacency();
    let mut parent = vec![None; n];
    let mut visited = vec![false; n];
    let mut in_tree = vec![false; net.edges.len()];
    let mut children = vec![Vec::new(); n];
    let mut node_order = Vec::with_capacity(n);
    let mut queue = VecDeque::from([root]);
    visited[root] = true;
    while let Some(u) = queue.pop_front() {
        node_order.push(u);
        for &(e, v) in &adj[u] {
            if !visited[v] {
                visited[v] = true;
                parent[v] = Some((u, e));
                in_tree[e] = true;
                children[u].push((v, e));
                queue.push_back(v);
            }
        }
    }
    if node_order.len() != n {
        return Err(NetworkError::DisconnectedGraph);
    }
    let mut position = vec![0; n];
    for (i, &v) in node_order.iter().enumerate() {
        position[v] = i;
    }
    let by_id = net.edges_by_id();
    let tree_edges = by_id.iter().copied().filter(|&e| in_tree[e]).collect();
    let chords = by_id.iter().copied().filter(|&e| !in_tree[e]).collect();
    Ok(TreeDecomposition { root, tree_edges, chords, node_order, parent, position, children, in_tree })
}

/// Orders the discrete edges so that every prefix spans a connected
/// sub-network together with the root: edges sorted by the earliest
/// `node_order` position of their end nodes, ties by edge id.
pub fn fragment_order(net: &Network, tree: &TreeDecomposition, discrete: &[EdgeIx]) -> Result<Vec<EdgeIx>, NetworkError> {
    if let Some(&bad) = discrete.iter().find(|&&e| e >= net.edges.len()) {
        return Err(NetworkError::UnknownEdge(bad));
    }
    let mut order: Vec<EdgeIx> = discrete.to_vec();
    order.sort_by(|&a, &b| {
        let key = |e: EdgeIx| {
            let (x, y) = net.ends(e);
            tree.position(x).min(tree.position(y))
        };
        key(a).cmp(&key(b)).then_with(|| net.edges[a].id.cmp(&net.edges[b].id))
    });
    order.dedup();
    Ok(order)
}

/// Minimal sub-network containing the root, the first `m` edges of `order`
/// and their end nodes: the tree paths from the root to those end nodes plus
/// the edges themselves.
pub fn prefix_subnetwork(net: &Network, tree: &TreeDecomposition, order: &[EdgeIx], m: usize) -> Network {
    let m = m.min(order.len());
    let mut node_in = vec![false; net.nodes.len()];
    let mut edge_in = vec![false; net.edges.len()];
    node_in[tree.root()] = true;
    for &e in &order[..m] {
        edge_in[e] = true;
        let (a, b) = net.ends(e);
        for end in [a, b] {
            let mut v = end;
            node_in[v] = true;
            while let Some((p, pe)) = tree.parent(v) {
                edge_in[pe] = true;
                node_in[p] = true;
                v = p;
            }
        }
    }
    let nodes = net.nodes.iter().zip(&node_in).filter(|(_, k)| **k).map(|(n, _)| n.clone()).collect();
    let edges = net.edges.iter().zip(&edge_in).filter(|(_, k)| **k).map(|(e, _)| e.clone()).collect();
    Network::new(nodes, edges, net.node(tree.root()).id.clone())
}

/// Partial discrete assignment `(d_1, ..., d_M)`; zero means "not given".
/// Only prefix-supported vectors are representable.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Fragment {
    values: Vec<usize>,
}

impl Fragment {
    pub fn empty(len: usize) -> Self {
        Self { values: vec![0; len] }
    }

    /// Validates `0 <= d_j <= N_j` and the zero tail.
    pub fn new(values: Vec<usize>, arity: &[usize]) -> Result<Self, String> {
        if values.len() != arity.len() {
            return Err(format!("fragment has {} entries for {} discrete edges", values.len(), arity.len()));
        }
        if let Some(j) = (0..values.len()).find(|&j| values[j] > arity[j]) {
            return Err(format!("d_{} = {} exceeds N = {}", j + 1, values[j], arity[j]));
        }
        let m = values.iter().rposition(|&d| d != 0).map_or(0, |p| p + 1);
        if values[..m].contains(&0) {
            return Err("fragment has a gap before its last given value".to_string());
        }
        Ok(Self { values })
    }

    pub(crate) fn from_raw(values: Vec<usize>) -> Self {
        Self { values }
    }

    pub fn values(&self) -> &[usize] {
        &self.values
    }

    /// `M`.
    pub fn capacity(&self) -> usize {
        self.values.len()
    }

    /// `m`, the number of given values.
    pub fn length(&self) -> usize {
        self.values.iter().rposition(|&d| d != 0).map_or(0, |p| p + 1)
    }

    pub fn is_full(&self) -> bool {
        self.length() == self.values.len()
    }
}

impl fmt::Display for Fragment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, d) in self.values.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{d}")?;
        }
        write!(f, ")")
    }
}

/// Full network state `s = (q, Q, p, c, d)`; edge flows are oriented from
/// `from` to `to`.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkState {
    pub edge_flow: Vec<f64>,
    pub node_intensity: Vec<f64>,
    pub node_potential: Vec<f64>,
    pub edge_params: Vec<Vec<f64>>,
    /// 1-based model choice per edge, 0 when unset.
    pub edge_choice: Vec<usize>,
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    pub fn node(id: &str) -> NodeSpec {
        NodeSpec::new(id, Bounds::new(-100.0, 100.0), Bounds::new(0.1, 1000.0))
    }

    /// Root S with a priced potential feeding A and B in series; two
    /// resistor choices per edge.
    pub fn fixture_d() -> Network {
        let nodes = vec![
            NodeSpec::new("S", Bounds::new(0.0, 10.0), Bounds::new(10.0, 19.0))
                .with_cost(NodeCost { per_intensity: 0.0, per_potential: 1.0 }),
            NodeSpec::new("A", Bounds::point(-2.0), Bounds::new(5.0, 30.0)),
            NodeSpec::new("B", Bounds::point(-3.0), Bounds::new(4.0, 30.0)),
        ];
        let edges = vec![
            EdgeSpec::new(
                "e1",
                "S",
                "A",
                vec![EdgeModel::resistor(1.0).with_cost(8.0), EdgeModel::resistor(3.0).with_cost(2.0)],
            ),
            EdgeSpec::new(
                "e2",
                "A",
                "B",
                vec![EdgeModel::resistor(1.0).with_cost(7.0), EdgeModel::resistor(2.0).with_cost(3.0)],
            ),
        ];
        Network::new(nodes, edges, "S")
    }

    pub fn triangle(model: EdgeModel) -> Network {
        Network::new(
            vec![node("1"), node("2"), node("3")],
            vec![
                EdgeSpec::new("e12", "1", "2", vec![model.clone()]),
                EdgeSpec::new("e13", "1", "3", vec![model.clone()]),
                EdgeSpec::new("e23", "2", "3", vec![model]),
            ],
            "1",
        )
    }

    pub fn path(n: usize, model: EdgeModel) -> Network {
        let nodes = (1..=n).map(|i| node(&i.to_string())).collect();
        let edges = (1..n)
            .map(|i| EdgeSpec::new(format!("e{}{}", i, i + 1), i.to_string(), (i + 1).to_string(), vec![model.clone()]))
            .collect();
        Network::new(nodes, edges, "1")
    }
}
