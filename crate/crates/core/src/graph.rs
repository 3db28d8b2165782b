//! Directed graph model, seeded graph families, and path oracles.
//!
//! Vertices are dense `usize` ids starting at 0. Every graph carries a
//! designated source and destination and a per-vertex leakage in `[0, 1]`.
//! Leakage at the source and destination is pinned to zero: flow is injected
//! and extracted there, and path leakage only runs over interior vertices.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, HashMap, VecDeque};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type VertexId = usize;
pub type EdgeId = usize;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("vertex {0} does not exist")]
    UnknownVertex(VertexId),
    #[error("source and destination must differ (both are {0})")]
    SourceIsDestination(VertexId),
    #[error("self-loop at vertex {0}")]
    SelfLoop(VertexId),
    #[error("duplicate edge ({0}, {1})")]
    DuplicateEdge(VertexId, VertexId),
    #[error("leakage {value} at vertex {vertex} is outside [0, 1]")]
    LeakageOutOfRange { vertex: VertexId, value: f64 },
    #[error("leakage at the source/destination vertex {0} must be 0")]
    TerminalLeakage(VertexId),
    #[error("path length must be at least {min} edges, got {got}")]
    PathTooShort { min: usize, got: usize },
    #[error("expected {expected} leakage values, got {got}")]
    LeakageLengthMismatch { expected: usize, got: usize },
    #[error("invalid path: {0}")]
    InvalidPath(String),
    #[error("planted length {requested} is not strictly shorter than the current shortest path ({current})")]
    PlantNotShorter { requested: usize, current: usize },
    #[error("invalid generator parameter: {0}")]
    InvalidParameter(String),
    #[error("malformed graph document: {0}")]
    Document(String),
}

pub type Result<T, E = GraphError> = std::result::Result<T, E>;

/// A directed graph with stable edge ids, a source, a destination and
/// per-vertex leakage.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectedGraph {
    num_vertices: usize,
    edges: Vec<(VertexId, VertexId)>,
    out_adj: Vec<Vec<EdgeId>>,
    in_adj: Vec<Vec<EdgeId>>,
    edge_index: HashMap<(VertexId, VertexId), EdgeId>,
    source: VertexId,
    destination: VertexId,
    leakage: Vec<f64>,
}

impl DirectedGraph {
    pub fn new(num_vertices: usize, source: VertexId, destination: VertexId) -> Result<Self> {
        if source >= num_vertices {
            return Err(GraphError::UnknownVertex(source));
        }
        if destination >= num_vertices {
            return Err(GraphError::UnknownVertex(destination));
        }
        if source == destination {
            return Err(GraphError::SourceIsDestination(source));
        }
        Ok(Self {
            num_vertices,
            edges: Vec::new(),
            out_adj: vec![Vec::new(); num_vertices],
            in_adj: vec![Vec::new(); num_vertices],
            edge_index: HashMap::new(),
            source,
            destination,
            leakage: vec![0.0; num_vertices],
        })
    }

    pub fn num_vertices(&self) -> usize {
        self.num_vertices
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn source(&self) -> VertexId {
        self.source
    }

    pub fn destination(&self) -> VertexId {
        self.destination
    }

    pub fn edges(&self) -> &[(VertexId, VertexId)] {
        &self.edges
    }

    pub fn endpoints(&self, edge: EdgeId) -> (VertexId, VertexId) {
        self.edges[edge]
    }

    pub fn out_edges(&self, v: VertexId) -> &[EdgeId] {
        &self.out_adj[v]
    }

    pub fn in_edges(&self, v: VertexId) -> &[EdgeId] {
        &self.in_adj[v]
    }

    pub fn edge_between(&self, u: VertexId, v: VertexId) -> Option<EdgeId> {
        self.edge_index.get(&(u, v)).copied()
    }

    pub fn leakage(&self, v: VertexId) -> f64 {
        self.leakage[v]
    }

    pub fn leakages(&self) -> &[f64] {
        &self.leakage
    }

    pub fn add_vertex(&mut self) -> VertexId {
        self.num_vertices += 1;
        self.out_adj.push(Vec::new());
        self.in_adj.push(Vec::new());
        self.leakage.push(0.0);
        self.num_vertices - 1
    }

    pub fn add_edge(&mut self, u: VertexId, v: VertexId) -> Result<EdgeId> {
        self.check_vertex(u)?;
        self.check_vertex(v)?;
        if u == v {
            return Err(GraphError::SelfLoop(u));
        }
        if self.edge_index.contains_key(&(u, v)) {
            return Err(GraphError::DuplicateEdge(u, v));
        }
        let id = self.edges.len();
        self.edges.push((u, v));
        self.out_adj[u].push(id);
        self.in_adj[v].push(id);
        self.edge_index.insert((u, v), id);
        Ok(id)
    }

    pub fn set_leakage(&mut self, v: VertexId, value: f64) -> Result<()> {
        self.check_vertex(v)?;
        if !(0.0..=1.0).contains(&value) {
            return Err(GraphError::LeakageOutOfRange { vertex: v, value });
        }
        if (v == self.source || v == self.destination) && value != 0.0 {
            return Err(GraphError::TerminalLeakage(v));
        }
        self.leakage[v] = value;
        Ok(())
    }

    /// Assigns a leakage to every vertex except the source and destination.
    pub fn assign_interior_leakage(&mut self, mut f: impl FnMut(VertexId) -> f64) -> Result<()> {
        for v in 0..self.num_vertices {
            if v != self.source && v != self.destination {
                let value = f(v);
                self.set_leakage(v, value)?;
            }
        }
        Ok(())
    }

    /// Vertex ids adjacent through out-edges, sorted ascending.
    pub fn successors_sorted(&self, v: VertexId) -> Vec<VertexId> {
        let mut out: Vec<VertexId> = self.out_adj[v].iter().map(|&e| self.edges[e].1).collect();
        out.sort_unstable();
        out
    }

    fn check_vertex(&self, v: VertexId) -> Result<()> {
        if v < self.num_vertices {
            Ok(())
        } else {
            Err(GraphError::UnknownVertex(v))
        }
    }

    pub fn to_document(&self) -> GraphDocument {
        GraphDocument {
            vertices: self.num_vertices,
            edges: self.edges.iter().map(|&(u, v)| [u, v]).collect(),
            source: self.source,
            destination: self.destination,
            leakage: self.leakage.iter().enumerate().filter(|(_, &l)| l != 0.0).map(|(v, &l)| (v, l)).collect(),
        }
    }

    pub fn from_document(doc: &GraphDocument) -> Result<Self> {
        let mut g = DirectedGraph::new(doc.vertices, doc.source, doc.destination)?;
        for &[u, v] in &doc.edges {
            g.add_edge(u, v)?;
        }
        for (&v, &l) in &doc.leakage {
            g.set_leakage(v, l)?;
        }
        Ok(g)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_document()).expect("graph document serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: GraphDocument = serde_json::from_str(text).map_err(|e| GraphError::Document(e.to_string()))?;
        Self::from_document(&doc)
    }

    /// Plain structural DOT rendering. Interior vertices are sized by
    /// survival probability `1 - l_v`.
    pub fn to_dot(&self) -> String {
        let mut out = String::from("digraph G {\n");
        for v in 0..self.num_vertices {
            out.push_str(&format!(
                "  {v} [width={:.3}, label=\"{v}\"{}];\n",
                0.2 + 0.6 * (1.0 - self.leakage[v]),
                if v == self.source || v == self.destination { ", shape=doublecircle" } else { "" }
            ));
        }
        for &(u, v) in &self.edges {
            out.push_str(&format!("  {u} -> {v};\n"));
        }
        out.push_str("}\n");
        out
    }
}

/// JSON exchange form: `{vertices, edges: [[u, v], ...], source, destination, leakage: {v: l}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphDocument {
    pub vertices: usize,
    pub edges: Vec<[VertexId; 2]>,
    pub source: VertexId,
    pub destination: VertexId,
    #[serde(default)]
    pub leakage: BTreeMap<VertexId, f64>,
}

/// A simple directed path given by its vertex sequence.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Path {
    vertices: Vec<VertexId>,
}

impl Path {
    pub fn new(vertices: Vec<VertexId>) -> Self {
        Self { vertices }
    }

    pub fn vertices(&self) -> &[VertexId] {
        &self.vertices
    }

    /// Length in edges.
    pub fn len(&self) -> usize {
        self.vertices.len().saturating_sub(1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn interior(&self) -> &[VertexId] {
        if self.vertices.len() <= 2 {
            &[]
        } else {
            &self.vertices[1..self.vertices.len() - 1]
        }
    }

    /// Checks the path against `graph` and returns its edge ids.
    pub fn edges(&self, graph: &DirectedGraph) -> Result<Vec<EdgeId>> {
        let vs = &self.vertices;
        if vs.len() < 2 {
            return Err(GraphError::InvalidPath("fewer than two vertices".into()));
        }
        if vs[0] != graph.source() || *vs.last().unwrap() != graph.destination() {
            return Err(GraphError::InvalidPath("path must start at the source and end at the destination".into()));
        }
        let mut seen = vec![false; graph.num_vertices()];
        for &v in vs {
            if v >= graph.num_vertices() {
                return Err(GraphError::UnknownVertex(v));
            }
            if std::mem::replace(&mut seen[v], true) {
                return Err(GraphError::InvalidPath(format!("vertex {v} repeats")));
            }
        }
        vs.windows(2)
            .map(|w| {
                graph
                    .edge_between(w[0], w[1])
                    .ok_or_else(|| GraphError::InvalidPath(format!("no edge ({}, {})", w[0], w[1])))
            })
            .collect()
    }

    /// Compact id such as `0-4-7-9`.
    pub fn id(&self) -> String {
        self.vertices.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("-")
    }
}

/// Two vertex-disjoint s→d paths. The top path is built first.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoPathGraph {
    graph: DirectedGraph,
    top: Path,
    bottom: Path,
}

/// Which of the two parallel paths an edge or verdict refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Top,
    Bottom,
}

impl Branch {
    pub fn other(self) -> Branch {
        match self {
            Branch::Top => Branch::Bottom,
            Branch::Bottom => Branch::Top,
        }
    }
}

impl TwoPathGraph {
    pub fn graph(&self) -> &DirectedGraph {
        &self.graph
    }

    pub fn into_graph(self) -> DirectedGraph {
        self.graph
    }

    pub fn top(&self) -> &Path {
        &self.top
    }

    pub fn bottom(&self) -> &Path {
        &self.bottom
    }

    pub fn path(&self, branch: Branch) -> &Path {
        match branch {
            Branch::Top => &self.top,
            Branch::Bottom => &self.bottom,
        }
    }

    /// `max(len(top), len(bottom))`, the window of the ratio potential.
    pub fn max_len(&self) -> usize {
        self.top.len().max(self.bottom.len())
    }

    /// Edge ids along the given branch, in order from s to d.
    pub fn branch_edges(&self, branch: Branch) -> Vec<EdgeId> {
        self.path(branch).edges(&self.graph).expect("two-path graph holds its own paths")
    }

    /// The edge leaving the source on `branch`.
    pub fn source_edge(&self, branch: Branch) -> EdgeId {
        let vs = self.path(branch).vertices();
        self.graph.edge_between(vs[0], vs[1]).unwrap()
    }

    /// The edge entering the destination on `branch`.
    pub fn destination_edge(&self, branch: Branch) -> EdgeId {
        let vs = self.path(branch).vertices();
        let k = vs.len();
        self.graph.edge_between(vs[k - 2], vs[k - 1]).unwrap()
    }

    pub fn branch_of_edge(&self, edge: EdgeId) -> Branch {
        let (u, v) = self.graph.endpoints(edge);
        let interior = if u == self.graph.source() { v } else { u };
        if self.top.interior().contains(&interior) {
            Branch::Top
        } else {
            Branch::Bottom
        }
    }

    /// Survival factor `1 - l_P` of a branch.
    pub fn survival(&self, branch: Branch) -> f64 {
        1.0 - path_leakage(&self.graph, self.path(branch)).expect("own path is valid")
    }

    /// Replaces the interior leakage of both branches.
    pub fn with_leakage(&self, leak_top: &[f64], leak_bottom: &[f64]) -> Result<Self> {
        build_two_path(self.top.len(), self.bottom.len(), leak_top, leak_bottom)
    }
}

/// Builds two parallel s→d paths with `m` and `n` edges.
///
/// Layout: s = 0, d = 1, then the top interior vertices, then the bottom ones.
pub fn build_two_path(m: usize, n: usize, leak_top: &[f64], leak_bottom: &[f64]) -> Result<TwoPathGraph> {
    for len in [m, n] {
        if len < 2 {
            return Err(GraphError::PathTooShort { min: 2, got: len });
        }
    }
    for (len, leaks) in [(m, leak_top), (n, leak_bottom)] {
        if leaks.len() != len - 1 {
            return Err(GraphError::LeakageLengthMismatch { expected: len - 1, got: leaks.len() });
        }
    }
    let mut g = DirectedGraph::new(m + n, 0, 1)?;
    let mut build = |first: usize, len: usize, leaks: &[f64]| -> Result<Path> {
        let mut vs = vec![0];
        vs.extend(first..first + len - 1);
        vs.push(1);
        for w in vs.windows(2) {
            g.add_edge(w[0], w[1])?;
        }
        for (i, &l) in leaks.iter().enumerate() {
            if !(0.0..1.0).contains(&l) {
                return Err(GraphError::LeakageOutOfRange { vertex: first + i, value: l });
            }
            g.set_leakage(first + i, l)?;
        }
        Ok(Path::new(vs))
    };
    let top = build(2, m, leak_top)?;
    let bottom = build(m + 1, n, leak_bottom)?;
    Ok(TwoPathGraph { graph: g, top, bottom })
}

fn check_probability(p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(GraphError::InvalidParameter(format!("probability {p} outside [0, 1]")))
    }
}

/// Directed G(n, p): every ordered pair `(i, j)`, `i != j`, is an edge with
/// probability `p`. Vertex 0 is the source and vertex `n - 1` the destination.
pub fn gen_gnp(n: usize, p: f64, seed: u64) -> Result<DirectedGraph> {
    gen_banded_gnp(n, p, n, seed)
}

/// G(n, p) restricted to candidate pairs with `|i - j| <= k`.
pub fn gen_banded_gnp(n: usize, p: f64, k: usize, seed: u64) -> Result<DirectedGraph> {
    if n < 2 {
        return Err(GraphError::InvalidParameter(format!("need at least 2 vertices, got {n}")));
    }
    if k < 1 {
        return Err(GraphError::InvalidParameter("band width must be at least 1".into()));
    }
    check_probability(p)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = DirectedGraph::new(n, 0, n - 1)?;
    for i in 0..n {
        let lo = i.saturating_sub(k);
        let hi = (i + k).min(n - 1);
        for j in lo..=hi {
            if i != j && rng.gen::<f64>() < p {
                g.add_edge(i, j)?;
            }
        }
    }
    Ok(g)
}

/// Grid with rightward and downward edges; source top-left, destination
/// bottom-right. Vertex `(r, c)` has id `r * cols + c`.
pub fn gen_grid(rows: usize, cols: usize) -> Result<DirectedGraph> {
    if rows < 2 || cols < 2 {
        return Err(GraphError::InvalidParameter(format!("grid {rows}x{cols} is smaller than 2x2")));
    }
    let mut g = DirectedGraph::new(rows * cols, 0, rows * cols - 1)?;
    for r in 0..rows {
        for c in 0..cols {
            let v = r * cols + c;
            if c + 1 < cols {
                g.add_edge(v, v + 1)?;
            }
            if r + 1 < rows {
                g.add_edge(v, v + cols)?;
            }
        }
    }
    Ok(g)
}

/// Vertex sequence `1, k+1, 2(k+1), ...` (1-based) ending at the destination,
/// the fixed planted pattern for banded graphs. Returned with 0-based ids.
pub fn banded_pattern(n: usize, k: usize) -> Vec<VertexId> {
    let mut seq = vec![0];
    let mut j = 1;
    while j * (k + 1) < n {
        seq.push(j * (k + 1) - 1);
        j += 1;
    }
    if *seq.last().unwrap() != n - 1 {
        seq.push(n - 1);
    }
    seq
}

/// Adds the edges of an explicit s→d vertex sequence and requires it to be the
/// unique shortest path afterwards.
pub fn plant_vertex_sequence(graph: &DirectedGraph, seq: &[VertexId]) -> Result<(DirectedGraph, Path)> {
    let mut g = graph.clone();
    let path = Path::new(seq.to_vec());
    for w in seq.windows(2) {
        if g.edge_between(w[0], w[1]).is_none() {
            g.add_edge(w[0], w[1])?;
        }
    }
    path.edges(&g)?;
    if count_shortest_paths(&g) != 1 || shortest_path(&g).as_ref() != Some(&path) {
        return Err(GraphError::InvalidPath(format!("planted sequence {} is not the unique shortest path", path.id())));
    }
    Ok((g, path))
}

/// Plants an s→d path of `length` edges that becomes the unique shortest path.
///
/// Interior vertices are first drawn at random from the existing non-terminal
/// vertices; a draw is kept only if the result has the planted path as its
/// unique shortest path. When no draw succeeds within the attempt budget,
/// `length - 1` fresh vertices are appended instead, which always succeeds.
pub fn plant_path(graph: &DirectedGraph, length: usize, seed: u64) -> Result<(DirectedGraph, Path)> {
    if length == 0 {
        return Err(GraphError::InvalidParameter("planted length must be positive".into()));
    }
    if let Some(current) = shortest_path(graph) {
        if length >= current.len() {
            return Err(GraphError::PlantNotShorter { requested: length, current: current.len() });
        }
    }
    let s = graph.source();
    let d = graph.destination();
    let pool: Vec<VertexId> = (0..graph.num_vertices()).filter(|&v| v != s && v != d).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    const ATTEMPTS: usize = 1000;
    if pool.len() >= length - 1 {
        for _ in 0..ATTEMPTS {
            let mut seq = vec![s];
            seq.extend(pool.choose_multiple(&mut rng, length - 1).copied());
            seq.push(d);
            if let Ok(found) = plant_vertex_sequence(graph, &seq) {
                return Ok(found);
            }
        }
    }
    let mut g = graph.clone();
    let mut seq = vec![s];
    for _ in 0..length - 1 {
        seq.push(g.add_vertex());
    }
    seq.push(d);
    for w in seq.windows(2) {
        g.add_edge(w[0], w[1])?;
    }
    let path = Path::new(seq);
    debug_assert_eq!(shortest_path(&g).as_ref(), Some(&path));
    Ok((g, path))
}

fn bfs(graph: &DirectedGraph, start: VertexId, forward: bool) -> Vec<Option<usize>> {
    let mut dist = vec![None; graph.num_vertices()];
    dist[start] = Some(0);
    let mut queue = VecDeque::from([start]);
    while let Some(u) = queue.pop_front() {
        let du = dist[u].unwrap();
        let adj = if forward { graph.out_edges(u) } else { graph.in_edges(u) };
        for &e in adj {
            let (a, b) = graph.endpoints(e);
            let w = if forward { b } else { a };
            if dist[w].is_none() {
                dist[w] = Some(du + 1);
                queue.push_back(w);
            }
        }
    }
    dist
}

/// Minimum-edge-count s→d path; ties go to the lexicographically smallest
/// vertex sequence.
pub fn shortest_path(graph: &DirectedGraph) -> Option<Path> {
    let s = graph.source();
    let d = graph.destination();
    let from_s = bfs(graph, s, true);
    let to_d = bfs(graph, d, false);
    let total = from_s[d]?;
    let mut seq = vec![s];
    let mut u = s;
    while u != d {
        let step = from_s[u].unwrap() + 1;
        u = graph
            .successors_sorted(u)
            .into_iter()
            .find(|&v| from_s[v] == Some(step) && to_d[v].map(|r| step + r) == Some(total))?;
        seq.push(u);
    }
    Some(Path::new(seq))
}

/// Number of distinct shortest s→d paths (saturating).
pub fn count_shortest_paths(graph: &DirectedGraph) -> u64 {
    let s = graph.source();
    let d = graph.destination();
    let dist = bfs(graph, s, true);
    let Some(target) = dist[d] else { return 0 };
    let mut order: Vec<VertexId> = (0..graph.num_vertices()).filter(|&v| dist[v].is_some()).collect();
    order.sort_by_key(|&v| dist[v]);
    let mut count = vec![0u64; graph.num_vertices()];
    count[s] = 1;
    for u in order {
        if dist[u].unwrap() >= target {
            continue;
        }
        for &e in graph.out_edges(u) {
            let v = graph.endpoints(e).1;
            if dist[v] == Some(dist[u].unwrap() + 1) {
                count[v] = count[v].saturating_add(count[u]);
            }
        }
    }
    count[d]
}

/// `1 - prod(1 - l_v)` over the interior vertices of `path`.
pub fn path_leakage(graph: &DirectedGraph, path: &Path) -> Result<f64> {
    path.edges(graph)?;
    let survival: f64 = path.interior().iter().map(|&v| 1.0 - graph.leakage(v)).product();
    Ok(1.0 - survival)
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Cost {
    weight: f64,
    hops: usize,
}

impl Cost {
    const ZERO: Cost = Cost { weight: 0.0, hops: 0 };

    fn cmp_total(&self, other: &Cost) -> Ordering {
        self.weight.total_cmp(&other.weight).then(self.hops.cmp(&other.hops))
    }
}

#[derive(PartialEq)]
struct HeapEntry(Cost, VertexId);

impl Eq for HeapEntry {}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.cmp_total(&self.0).then(other.1.cmp(&self.1))
    }
}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Additive weight of routing through `v`: `-ln(1 - l_v)`, infinite when the
/// vertex absorbs everything. The destination contributes nothing.
fn vertex_weight(graph: &DirectedGraph, v: VertexId) -> f64 {
    if v == graph.destination() || v == graph.source() {
        return 0.0;
    }
    let l = graph.leakage(v);
    if l >= 1.0 {
        f64::INFINITY
    } else {
        -(-l).ln_1p()
    }
}

fn dijkstra(graph: &DirectedGraph, forward: bool) -> Vec<Option<Cost>> {
    let start = if forward { graph.source() } else { graph.destination() };
    let mut best: Vec<Option<Cost>> = vec![None; graph.num_vertices()];
    best[start] = Some(Cost::ZERO);
    let mut heap = BinaryHeap::from([HeapEntry(Cost::ZERO, start)]);
    while let Some(HeapEntry(cost, u)) = heap.pop() {
        if best[u].is_some_and(|b| b.cmp_total(&cost) == Ordering::Less) {
            continue;
        }
        let adj = if forward { graph.out_edges(u) } else { graph.in_edges(u) };
        for &e in adj {
            let (a, b) = graph.endpoints(e);
            let w = if forward { b } else { a };
            // Forward search charges the vertex being entered; backward search
            // charges the vertex being left, so both exclude the terminals.
            let charge = if forward { vertex_weight(graph, w) } else { vertex_weight(graph, u) };
            if !charge.is_finite() {
                continue;
            }
            let next = Cost { weight: cost.weight + charge, hops: cost.hops + 1 };
            if best[w].map_or(true, |b| next.cmp_total(&b) == Ordering::Less) {
                best[w] = Some(next);
                heap.push(HeapEntry(next, w));
            }
        }
    }
    best
}

/// The s→d path with the least leakage, i.e. the largest product of interior
/// survival factors. Among equal-leakage paths the one with fewest edges wins,
/// then the lexicographically smallest vertex sequence.
pub fn min_leakage_path(graph: &DirectedGraph) -> Option<Path> {
    let s = graph.source();
    let d = graph.destination();
    let from_s = dijkstra(graph, true);
    let to_d = dijkstra(graph, false);
    let total = from_s[d]?;
    let tol = 1e-12 * (1.0 + total.weight);
    let mut seq = vec![s];
    let mut u = s;
    let mut visited = vec![false; graph.num_vertices()];
    visited[s] = true;
    while u != d {
        let here = from_s[u].unwrap();
        let next = graph.successors_sorted(u).into_iter().find(|&v| {
            if visited[v] {
                return false;
            }
            let (Some(fv), Some(tv)) = (from_s[v], to_d[v]) else {
                return false;
            };
            let through = here.weight + vertex_weight(graph, v);
            fv.hops == here.hops + 1
                && (fv.weight - through).abs() <= tol
                && (through + tv.weight - total.weight).abs() <= tol
                && here.hops + 1 + tv.hops == total.hops
        })?;
        visited[next] = true;
        seq.push(next);
        u = next;
    }
    Some(Path::new(seq))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_path_example_leakages() {
        let tp = build_two_path(2, 3, &[0.03], &[0.05, 0.0]).unwrap();
        assert_eq!(tp.graph().num_vertices(), 5);
        assert_eq!(tp.graph().num_edges(), 5);
        let lt = path_leakage(tp.graph(), tp.top()).unwrap();
        let lb = path_leakage(tp.graph(), tp.bottom()).unwrap();
        assert!((lt - 0.03).abs() < 1e-15);
        assert!((lb - 0.05).abs() < 1e-15);

        let tp = build_two_path(2, 3, &[0.5], &[0.5, 0.5]).unwrap();
        assert!((path_leakage(tp.graph(), tp.bottom()).unwrap() - 0.75).abs() < 1e-15);

        let tp = build_two_path(2, 2, &[0.0], &[0.0]).unwrap();
        assert_eq!(path_leakage(tp.graph(), tp.top()).unwrap(), 0.0);
        assert_eq!(path_leakage(tp.graph(), tp.bottom()).unwrap(), 0.0);
    }

    #[test]
    fn two_path_rejects_bad_input() {
        assert!(matches!(build_two_path(1, 3, &[], &[0.0, 0.0]), Err(GraphError::PathTooShort { .. })));
        assert!(matches!(
            build_two_path(2, 3, &[0.1, 0.2], &[0.0, 0.0]),
            Err(GraphError::LeakageLengthMismatch { .. })
        ));
        assert!(matches!(build_two_path(2, 2, &[1.0], &[0.0]), Err(GraphError::LeakageOutOfRange { .. })));
        assert!(build_two_path(2, 2, &[-0.1], &[0.0]).is_err());
    }

    #[test]
    fn two_path_degrees() {
        let tp = build_two_path(3, 4, &[0.0; 2], &[0.0; 3]).unwrap();
        let g = tp.graph();
        assert_eq!(g.out_edges(g.source()).len(), 2);
        assert_eq!(g.in_edges(g.destination()).len(), 2);
        for v in 2..g.num_vertices() {
            assert_eq!(g.out_edges(v).len(), 1);
            assert_eq!(g.in_edges(v).len(), 1);
        }
        assert_eq!(tp.max_len(), 4);
    }

    #[test]
    fn graph_invariants_enforced() {
        assert!(DirectedGraph::new(3, 1, 1).is_err());
        assert!(DirectedGraph::new(3, 0, 3).is_err());
        let mut g = DirectedGraph::new(3, 0, 2).unwrap();
        assert_eq!(g.add_edge(1, 1), Err(GraphError::SelfLoop(1)));
        g.add_edge(0, 1).unwrap();
        assert_eq!(g.add_edge(0, 1), Err(GraphError::DuplicateEdge(0, 1)));
        assert_eq!(g.set_leakage(0, 0.1), Err(GraphError::TerminalLeakage(0)));
        assert!(g.set_leakage(1, 1.5).is_err());
        g.set_leakage(1, 1.0).unwrap();
    }

    #[test]
    fn gnp_extremes() {
        let g = gen_gnp(2, 1.0, 0).unwrap();
        assert_eq!(g.edges(), &[(0, 1), (1, 0)]);
        let g = gen_gnp(5, 0.0, 7).unwrap();
        assert_eq!(g.num_edges(), 0);
        assert!(gen_gnp(1, 0.5, 0).is_err());
        assert!(gen_gnp(5, 1.5, 0).is_err());
    }

    #[test]
    fn banded_pattern_and_extremes() {
        let g = gen_banded_gnp(10, 1.0, 1, 0).unwrap();
        let mut e: Vec<_> = g.edges().to_vec();
        e.sort();
        let mut expect = Vec::new();
        for i in 0..10usize {
            if i > 0 {
                expect.push((i, i - 1));
            }
            if i < 9 {
                expect.push((i, i + 1));
            }
        }
        expect.sort();
        assert_eq!(e, expect);

        let g = gen_banded_gnp(100, 0.5, 10, 1).unwrap();
        assert!(g.edge_between(0, 99).is_none());
        assert!(g.edge_between(99, 0).is_none());
    }

    #[test]
    fn banded_pattern_sequence() {
        // 1-based 1, 11, 22, ..., 99, 100
        let seq = banded_pattern(100, 10);
        assert_eq!(seq[0], 0);
        assert_eq!(seq[1], 10);
        assert_eq!(seq[2], 21);
        assert_eq!(*seq.last().unwrap(), 99);
        assert_eq!(seq.len(), 11);
    }

    #[test]
    fn grid_shapes() {
        let g = gen_grid(10, 10).unwrap();
        assert_eq!(g.num_vertices(), 100);
        assert_eq!(g.num_edges(), 2 * 10 * 10 - 10 - 10);
        assert_eq!(shortest_path(&g).unwrap().len(), 18);

        let g = gen_grid(2, 2).unwrap();
        assert_eq!(g.num_edges(), 4);
        assert_eq!(count_shortest_paths(&g), 2);
        assert_eq!(shortest_path(&g).unwrap().vertices(), &[0, 1, 3]);

        let g = gen_grid(3, 2).unwrap();
        assert_eq!(shortest_path(&g).unwrap().len(), 3);
    }

    #[test]
    fn shortest_path_cases() {
        let tp = build_two_path(2, 3, &[0.0], &[0.0, 0.0]).unwrap();
        assert_eq!(&shortest_path(tp.graph()).unwrap(), tp.top());
        let g = gen_gnp(5, 0.0, 1).unwrap();
        assert!(shortest_path(&g).is_none());
        assert!(min_leakage_path(&g).is_none());
    }

    #[test]
    fn plant_on_grid() {
        let g = gen_grid(10, 10).unwrap();
        let (planted, path) = plant_path(&g, 9, 3).unwrap();
        assert_eq!(path.len(), 9);
        assert_eq!(shortest_path(&planted).as_ref(), Some(&path));
        assert_eq!(count_shortest_paths(&planted), 1);
        assert!(matches!(plant_path(&g, 18, 0), Err(GraphError::PlantNotShorter { .. })));
    }

    #[test]
    fn plant_falls_back_to_fresh_vertices() {
        // No interior vertices to draw from.
        let mut g = DirectedGraph::new(2, 0, 1).unwrap();
        g.add_edge(1, 0).unwrap();
        let (planted, path) = plant_path(&g, 3, 0).unwrap();
        assert_eq!(planted.num_vertices(), 4);
        assert_eq!(path.vertices(), &[0, 2, 3, 1]);
    }

    #[test]
    fn min_leakage_prefers_survival() {
        let tp = build_two_path(2, 3, &[0.03], &[0.05, 0.0]).unwrap();
        assert_eq!(&min_leakage_path(tp.graph()).unwrap(), tp.top());
        let tp = build_two_path(2, 3, &[0.5], &[0.1, 0.1]).unwrap();
        assert_eq!(&min_leakage_path(tp.graph()).unwrap(), tp.bottom());
        let tp = build_two_path(2, 2, &[1.0 - 1e-9], &[0.2]).unwrap();
        assert_eq!(&min_leakage_path(tp.graph()).unwrap(), tp.bottom());
    }

    #[test]
    fn fully_absorbing_vertex_blocks_route() {
        let mut tp = build_two_path(2, 2, &[0.0], &[0.0]).unwrap();
        tp.graph.set_leakage(2, 1.0).unwrap();
        tp.graph.set_leakage(3, 1.0).unwrap();
        assert!(min_leakage_path(tp.graph()).is_none());
    }

    #[test]
    fn min_leakage_matches_shortest_without_leakage() {
        for seed in 0..20 {
            let g = gen_gnp(30, 0.1, seed).unwrap();
            assert_eq!(min_leakage_path(&g), shortest_path(&g), "seed {seed}");
        }
    }

    #[test]
    fn json_round_trip() {
        let mut g = gen_gnp(12, 0.3, 5).unwrap();
        g.set_leakage(3, 0.25).unwrap();
        let back = DirectedGraph::from_json(&g.to_json()).unwrap();
        assert_eq!(back, g);
        assert!(DirectedGraph::from_json("{\"vertices\": 2}").is_err());
    }

    #[test]
    fn path_validation() {
        let g = gen_grid(2, 2).unwrap();
        assert!(Path::new(vec![0, 3]).edges(&g).is_err());
        assert!(Path::new(vec![1, 3]).edges(&g).is_err());
        assert_eq!(Path::new(vec![0, 2, 3]).edges(&g).unwrap().len(), 2);
        assert_eq!(Path::new(vec![0, 2, 3]).id(), "0-2-3");
    }
}
