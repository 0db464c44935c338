//! Directed-graph generation and reachability.
//!
//! Two graph families are supported: k-dimensional grid graphs, where each
//! node id maps to a base-b digit vector and edges step one unit along one
//! axis, and disconnected chain graphs made of vertex-disjoint directed
//! paths. Reachability queries go through a BFS-based [`ReachabilityClosure`];
//! grid graphs additionally admit an O(k) criterion on the difference of node
//! vectors, which must agree with BFS exactly.

use std::collections::{HashMap, VecDeque};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Hop-count sentinel for "no directed path".
pub const UNREACHABLE: u32 = u32::MAX;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GraphError {
    #[error("node {node} does not fit in {k} base-{base} digits")]
    DigitOverflow { node: u64, base: u64, k: u32 },
    #[error("graph must have at least {min} nodes, got {got}")]
    TooFewNodes { min: usize, got: usize },
    #[error("dimensionality must be at least 1")]
    ZeroDimension,
    #[error("chain count {chains} outside 1..={nodes}")]
    BadChainCount { chains: usize, nodes: usize },
    #[error("edge ({u}, {v}) is a self-loop")]
    SelfLoop { u: u32, v: u32 },
    #[error("edge ({u}, {v}) appears more than once")]
    DuplicateEdge { u: u32, v: u32 },
    #[error("edge ({u}, {v}) references a node >= {num_nodes}")]
    EdgeOutOfRange { u: u32, v: u32, num_nodes: usize },
    #[error("node {node} out of range for graph with {num_nodes} nodes")]
    NodeOutOfRange { node: u32, num_nodes: usize },
    #[error("connectivity is defined only for distinct nodes, got ({u}, {u})")]
    IdenticalPair { u: u32 },
}

/// A directed graph over nodes `0..num_nodes` with validated, lexicographically
/// ordered edges.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DirectedGraph {
    num_nodes: usize,
    edges: Vec<(u32, u32)>,
    adjacency: Vec<Vec<u32>>,
}

impl DirectedGraph {
    /// Validates and normalizes an edge list: no self-loops, no duplicates,
    /// all endpoints in range. Edges are stored sorted by `(u, v)`.
    pub fn new(num_nodes: usize, mut edges: Vec<(u32, u32)>) -> Result<Self, GraphError> {
        if num_nodes < 1 {
            return Err(GraphError::TooFewNodes { min: 1, got: num_nodes });
        }
        edges.sort_unstable();
        for window in edges.windows(2) {
            if window[0] == window[1] {
                let (u, v) = window[0];
                return Err(GraphError::DuplicateEdge { u, v });
            }
        }
        let mut adjacency = vec![Vec::new(); num_nodes];
        for &(u, v) in &edges {
            if u == v {
                return Err(GraphError::SelfLoop { u, v });
            }
            if u as usize >= num_nodes || v as usize >= num_nodes {
                return Err(GraphError::EdgeOutOfRange { u, v, num_nodes });
            }
            adjacency[u as usize].push(v);
        }
        Ok(Self { num_nodes, edges, adjacency })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    /// Edges sorted lexicographically by `(u, v)`.
    pub fn edges(&self) -> &[(u32, u32)] {
        &self.edges
    }

    pub fn successors(&self, u: u32) -> &[u32] {
        &self.adjacency[u as usize]
    }

    pub fn out_degree(&self, u: u32) -> usize {
        self.adjacency[u as usize].len()
    }

    pub fn in_degree(&self, u: u32) -> usize {
        self.edges.iter().filter(|&&(_, v)| v == u).count()
    }

    /// Weakly connected components, each sorted ascending, ordered by their
    /// smallest node.
    pub fn weakly_connected_components(&self) -> Vec<Vec<u32>> {
        let mut undirected = vec![Vec::new(); self.num_nodes];
        for &(u, v) in &self.edges {
            undirected[u as usize].push(v);
            undirected[v as usize].push(u);
        }
        let mut seen = vec![false; self.num_nodes];
        let mut components = Vec::new();
        for start in 0..self.num_nodes {
            if seen[start] {
                continue;
            }
            let mut queue = VecDeque::from([start as u32]);
            seen[start] = true;
            let mut component = Vec::new();
            while let Some(u) = queue.pop_front() {
                component.push(u);
                for &w in &undirected[u as usize] {
                    if !seen[w as usize] {
                        seen[w as usize] = true;
                        queue.push_back(w);
                    }
                }
            }
            component.sort_unstable();
            components.push(component);
        }
        components
    }
}

/// Per-node base-b digit vectors for a grid graph.
///
/// `vectors[id]` is the base-b expansion of `id`, least-significant digit at
/// index 0, padded to `k` digits. The map from node to vector is injective
/// because it inverts through positional notation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridEmbedding {
    k: usize,
    base_b: u32,
    vectors: Vec<Vec<u32>>,
}

impl GridEmbedding {
    pub fn dimensionality(&self) -> usize {
        self.k
    }

    pub fn base(&self) -> u32 {
        self.base_b
    }

    pub fn num_nodes(&self) -> usize {
        self.vectors.len()
    }

    pub fn vector(&self, node: u32) -> Result<&[u32], GraphError> {
        self.vectors
            .get(node as usize)
            .map(Vec::as_slice)
            .ok_or(GraphError::NodeOutOfRange { node, num_nodes: self.vectors.len() })
    }
}

/// All-pairs shortest hop counts computed by BFS from every node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReachabilityClosure {
    num_nodes: usize,
    dist: Vec<u32>,
}

impl ReachabilityClosure {
    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    /// Shortest-path hop count from `u` to `v`, or `None` when no directed
    /// path exists. `dist(u, u)` is `Some(0)`.
    pub fn dist(&self, u: u32, v: u32) -> Option<u32> {
        let d = self.dist[u as usize * self.num_nodes + v as usize];
        (d != UNREACHABLE).then_some(d)
    }

    pub fn is_reachable(&self, u: u32, v: u32) -> bool {
        self.dist[u as usize * self.num_nodes + v as usize] != UNREACHABLE
    }

    fn check_pair(&self, u: u32, v: u32) -> Result<(), GraphError> {
        for node in [u, v] {
            if node as usize >= self.num_nodes {
                return Err(GraphError::NodeOutOfRange { node, num_nodes: self.num_nodes });
            }
        }
        if u == v {
            return Err(GraphError::IdenticalPair { u });
        }
        Ok(())
    }
}

/// How an ordered pair of distinct nodes relates under reachability.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PairClass {
    /// A directed path `u -> v` exists.
    Positive,
    /// Only the opposite direction `v -> u` is reachable.
    ReverseNegative,
    /// No directed path in either direction.
    DisconnectedNegative,
}

/// Base-b digit expansion of `node`, least-significant digit first, padded to
/// `k` digits. Rejects values that do not fit in `k` digits.
pub fn node_to_vector(node: u64, base: u64, k: u32) -> Result<Vec<u32>, GraphError> {
    if base < 1 {
        return Err(GraphError::DigitOverflow { node, base, k });
    }
    if k < 1 {
        return Err(GraphError::ZeroDimension);
    }
    let capacity = (base as u128).checked_pow(k);
    if capacity.is_some_and(|cap| node as u128 >= cap) {
        return Err(GraphError::DigitOverflow { node, base, k });
    }
    let mut digits = Vec::with_capacity(k as usize);
    let mut rest = node;
    for _ in 0..k {
        digits.push((rest % base) as u32);
        rest /= base;
    }
    Ok(digits)
}

/// Smallest integer b with b^k >= n.
fn ceil_root(n: usize, k: usize) -> u32 {
    let target = n as u128;
    let mut b = (n as f64).powf(1.0 / k as f64).ceil() as u128;
    b = b.max(1);
    // Guard against float rounding on either side.
    while b.pow(k as u32) < target {
        b += 1;
    }
    while b > 1 && (b - 1).pow(k as u32) >= target {
        b -= 1;
    }
    b as u32
}

/// Generates the k-dimensional grid graph on nodes `0..n`.
///
/// The grid width is `b = ceil(n^(1/k))`; each node id becomes its base-b
/// digit vector, and an edge `u -> v` is added exactly when incrementing one
/// digit of `u`'s vector lands on the vector of an existing node `v < n`.
/// There is no wraparound or clipping for ids that are not perfect powers.
/// Fully deterministic.
pub fn generate_grid_graph(
    n: usize,
    k: usize,
) -> Result<(DirectedGraph, GridEmbedding), GraphError> {
    if n < 2 {
        return Err(GraphError::TooFewNodes { min: 2, got: n });
    }
    if k < 1 {
        return Err(GraphError::ZeroDimension);
    }
    let base = ceil_root(n, k);
    let mut vectors = Vec::with_capacity(n);
    let mut vector_to_node: HashMap<Vec<u32>, u32> = HashMap::with_capacity(n);
    for id in 0..n {
        let vector = node_to_vector(id as u64, base as u64, k as u32)?;
        vector_to_node.insert(vector.clone(), id as u32);
        vectors.push(vector);
    }
    let mut edges = Vec::new();
    for (id, vector) in vectors.iter().enumerate() {
        let mut candidate = vector.clone();
        for axis in 0..k {
            candidate[axis] += 1;
            if let Some(&v) = vector_to_node.get(&candidate) {
                edges.push((id as u32, v));
            }
            candidate[axis] -= 1;
        }
    }
    let graph = DirectedGraph::new(n, edges)?;
    let embedding = GridEmbedding { k, base_b: base, vectors };
    Ok((graph, embedding))
}

/// Generates a disconnected chain graph: `chains` directed paths of
/// `L = floor(n / chains)` nodes each, sampled without replacement from the
/// node set. If more than one node is left over, the leftovers form one
/// additional chain; a single leftover node stays isolated.
pub fn generate_chain_graph<R: Rng + ?Sized>(
    n: usize,
    chains: usize,
    rng: &mut R,
) -> Result<DirectedGraph, GraphError> {
    if n < 2 {
        return Err(GraphError::TooFewNodes { min: 2, got: n });
    }
    if chains < 1 || chains > n {
        return Err(GraphError::BadChainCount { chains, nodes: n });
    }
    let length = n / chains;
    let mut available: Vec<u32> = (0..n as u32).collect();
    let mut edges = Vec::new();
    for _ in 0..chains {
        let picked = rand::seq::index::sample(rng, available.len(), length);
        let chain: Vec<u32> = picked.iter().map(|i| available[i]).collect();
        let mut taken = vec![false; available.len()];
        for i in picked {
            taken[i] = true;
        }
        let mut write = 0;
        for read in 0..available.len() {
            if !taken[read] {
                available[write] = available[read];
                write += 1;
            }
        }
        available.truncate(write);
        for pair in chain.windows(2) {
            edges.push((pair[0], pair[1]));
        }
    }
    if available.len() > 1 {
        for pair in available.windows(2) {
            edges.push((pair[0], pair[1]));
        }
    }
    DirectedGraph::new(n, edges)
}

/// All-pairs hop distances via BFS from every node.
pub fn transitive_closure(graph: &DirectedGraph) -> ReachabilityClosure {
    let n = graph.num_nodes();
    let mut dist = vec![UNREACHABLE; n * n];
    let mut queue = VecDeque::new();
    for start in 0..n {
        let row = start * n;
        dist[row + start] = 0;
        queue.push_back(start as u32);
        while let Some(u) = queue.pop_front() {
            let du = dist[row + u as usize];
            for &v in graph.successors(u) {
                if dist[row + v as usize] == UNREACHABLE {
                    dist[row + v as usize] = du + 1;
                    queue.push_back(v);
                }
            }
        }
    }
    ReachabilityClosure { num_nodes: n, dist }
}

/// The connectivity indicator: true iff a directed path `u -> v` exists.
/// Defined only for distinct nodes.
pub fn connectivity(closure: &ReachabilityClosure, u: u32, v: u32) -> Result<bool, GraphError> {
    closure.check_pair(u, v)?;
    Ok(closure.is_reachable(u, v))
}

/// Grid connectivity decided from node vectors alone: true iff every
/// component of `vector(v) - vector(u)` is nonnegative.
pub fn grid_connectivity_via_embedding(
    embedding: &GridEmbedding,
    u: u32,
    v: u32,
) -> Result<bool, GraphError> {
    if u == v {
        return Err(GraphError::IdenticalPair { u });
    }
    let from = embedding.vector(u)?;
    let to = embedding.vector(v)?;
    Ok(from.iter().zip(to).all(|(&a, &b)| i64::from(b) - i64::from(a) >= 0))
}

/// Classifies an ordered pair of distinct nodes as positive, reverse
/// negative, or disconnected negative.
pub fn classify_pair(
    closure: &ReachabilityClosure,
    u: u32,
    v: u32,
) -> Result<PairClass, GraphError> {
    closure.check_pair(u, v)?;
    Ok(if closure.is_reachable(u, v) {
        PairClass::Positive
    } else if closure.is_reachable(v, u) {
        PairClass::ReverseNegative
    } else {
        PairClass::DisconnectedNegative
    })
}

/// Generative description of a graph; the unit of provenance for datasets,
/// runs, and sweeps. Serializes as `{"family": "...", "params": {...}}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "family", content = "params", rename_all = "snake_case")]
pub enum GraphSpec {
    Grid { n: usize, k: usize },
    Chain { n: usize, chains: usize, seed: u64 },
}

impl GraphSpec {
    pub fn num_nodes(&self) -> usize {
        match *self {
            GraphSpec::Grid { n, .. } | GraphSpec::Chain { n, .. } => n,
        }
    }

    /// Stable human-readable identity, e.g. `grid-n100-k2`.
    pub fn id(&self) -> String {
        match *self {
            GraphSpec::Grid { n, k } => format!("grid-n{n}-k{k}"),
            GraphSpec::Chain { n, chains, seed } => format!("chain-n{n}-c{chains}-s{seed}"),
        }
    }

    /// Short label for plot legends.
    pub fn label(&self) -> String {
        match *self {
            GraphSpec::Grid { n, k } => format!("grid n={n} k={k}"),
            GraphSpec::Chain { n, chains, .. } => format!("chain n={n} C={chains}"),
        }
    }

    pub fn generate(&self) -> Result<(DirectedGraph, Option<GridEmbedding>), GraphError> {
        match *self {
            GraphSpec::Grid { n, k } => {
                let (graph, embedding) = generate_grid_graph(n, k)?;
                Ok((graph, Some(embedding)))
            }
            GraphSpec::Chain { n, chains, seed } => {
                let mut rng = crate::seeded_rng(seed);
                Ok((generate_chain_graph(n, chains, &mut rng)?, None))
            }
        }
    }
}

/// On-disk JSON form of a generated graph.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GraphDocument {
    pub num_nodes: usize,
    pub edges: Vec<(u32, u32)>,
    #[serde(flatten)]
    pub spec: GraphSpec,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub embedding: Option<EmbeddingMeta>,
}

/// Embedding parameters serialized alongside grid graphs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingMeta {
    pub k: usize,
    pub b: u32,
}

impl GraphDocument {
    pub fn build(spec: GraphSpec) -> Result<Self, GraphError> {
        let (graph, embedding) = spec.generate()?;
        Ok(Self {
            num_nodes: graph.num_nodes(),
            edges: graph.edges().to_vec(),
            spec,
            embedding: embedding
                .map(|e| EmbeddingMeta { k: e.dimensionality(), b: e.base() }),
        })
    }

    pub fn to_graph(&self) -> Result<DirectedGraph, GraphError> {
        DirectedGraph::new(self.num_nodes, self.edges.clone())
    }
}
