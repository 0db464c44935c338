//! Vocabulary, connectivity examples, and train/test split construction.
//!
//! Every ordered pair of distinct nodes starts in the train split with its
//! oracle label. The test split is carved out of it: multi-hop positives
//! (hop distance > 1) move over together with their reverse negatives, and
//! sampled disconnected pairs move over in both directions. Train and test
//! therefore stay disjoint and jointly cover all ordered distinct pairs.

use std::collections::HashSet;
use std::io::{BufRead, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graphs::{DirectedGraph, GraphError, ReachabilityClosure};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("need {requested} multi-hop positive pairs but only {available} exist")]
    InsufficientMultiHop { requested: usize, available: usize },
    #[error("reverse pair ({u}, {v}) is unexpectedly positive; graph is not acyclic")]
    CyclicReversePair { u: u32, v: u32 },
    #[error("node {node} is not in a vocabulary of {num_nodes} nodes")]
    UnknownNode { node: u32, num_nodes: usize },
    #[error("vocabulary needs at least 2 nodes, got {0}")]
    VocabularyTooSmall(usize),
    #[error("closure covers {closure_nodes} nodes but graph has {graph_nodes}")]
    ClosureMismatch { closure_nodes: usize, graph_nodes: usize },
    #[error("dataset stream is missing its header record")]
    MissingHeader,
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("malformed dataset record: {0}")]
    Malformed(#[from] serde_json::Error),
}

/// Token layout over a graph with `n` nodes: ids `0..n` name the nodes, id
/// `n` is "Y", id `n + 1` is "N".
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocabulary {
    num_nodes: usize,
}

impl Vocabulary {
    pub fn size(&self) -> usize {
        self.num_nodes + 2
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn node_token(&self, node: u32) -> Result<u32, DatasetError> {
        if (node as usize) < self.num_nodes {
            Ok(node)
        } else {
            Err(DatasetError::UnknownNode { node, num_nodes: self.num_nodes })
        }
    }

    pub fn label_token(&self, label: Label) -> u32 {
        match label {
            Label::Y => self.num_nodes as u32,
            Label::N => self.num_nodes as u32 + 1,
        }
    }
}

/// Builds the vocabulary for a graph with `n >= 2` nodes.
pub fn build_vocabulary(n: usize) -> Result<Vocabulary, DatasetError> {
    if n < 2 {
        return Err(DatasetError::VocabularyTooSmall(n));
    }
    Ok(Vocabulary { num_nodes: n })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Y,
    N,
}

/// One connectivity example: does a directed path `start -> goal` exist?
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairExample {
    pub start: u32,
    pub goal: u32,
    pub label: Label,
}

/// Where a split came from, enough to regenerate it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitProvenance {
    pub graph_id: String,
    pub split_seed: u64,
    pub num_nodes: usize,
    pub pos_test: usize,
    pub disc_test_requested: usize,
    /// May fall short of the request when few disconnected pairs exist
    /// (for example, 1-dimensional grids have none).
    pub disc_test_sampled: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<PairExample>,
    pub test: Vec<PairExample>,
    pub provenance: SplitProvenance,
}

impl DatasetSplit {
    pub fn num_nodes(&self) -> usize {
        self.provenance.num_nodes
    }
}

pub const DEFAULT_POS_TEST: usize = 40;
pub const DEFAULT_DISC_TEST: usize = 40;

/// Carves a test split out of the full set of ordered distinct pairs.
///
/// `pos_test` multi-hop positives (hop distance > 1) move to test together
/// with their reverse negatives; `min(disc_test, available)` unordered
/// disconnected pairs move to test in both directions. Everything else stays
/// in train. Fails when fewer than `pos_test` multi-hop positives exist;
/// a shortfall of disconnected pairs is recorded in the provenance instead.
pub fn generate_train_test<R: Rng + ?Sized>(
    graph: &DirectedGraph,
    closure: &ReachabilityClosure,
    graph_id: &str,
    pos_test: usize,
    disc_test: usize,
    split_seed: u64,
    rng: &mut R,
) -> Result<DatasetSplit, DatasetError> {
    let n = graph.num_nodes();
    if closure.num_nodes() != n {
        return Err(DatasetError::ClosureMismatch {
            closure_nodes: closure.num_nodes(),
            graph_nodes: n,
        });
    }

    let mut multi_hop: Vec<(u32, u32)> = Vec::new();
    let mut disconnected: Vec<(u32, u32)> = Vec::new();
    for u in 0..n as u32 {
        for v in 0..n as u32 {
            if u == v {
                continue;
            }
            match closure.dist(u, v) {
                Some(d) if d > 1 => multi_hop.push((u, v)),
                None if u < v && !closure.is_reachable(v, u) => disconnected.push((u, v)),
                _ => {}
            }
        }
    }

    if multi_hop.len() < pos_test {
        return Err(DatasetError::InsufficientMultiHop {
            requested: pos_test,
            available: multi_hop.len(),
        });
    }

    let mut test = Vec::with_capacity(pos_test * 2 + disc_test * 2);
    let mut moved: HashSet<(u32, u32)> = HashSet::with_capacity(test.capacity());

    let picked = rand::seq::index::sample(rng, multi_hop.len(), pos_test);
    let positives: Vec<(u32, u32)> = picked.iter().map(|i| multi_hop[i]).collect();
    for &(u, v) in &positives {
        if closure.is_reachable(v, u) {
            return Err(DatasetError::CyclicReversePair { u: v, v: u });
        }
        test.push(PairExample { start: u, goal: v, label: Label::Y });
        moved.insert((u, v));
    }
    for &(u, v) in &positives {
        test.push(PairExample { start: v, goal: u, label: Label::N });
        moved.insert((v, u));
    }

    let disc_count = disc_test.min(disconnected.len());
    let picked = rand::seq::index::sample(rng, disconnected.len(), disc_count);
    for i in picked {
        let (u, v) = disconnected[i];
        test.push(PairExample { start: u, goal: v, label: Label::N });
        test.push(PairExample { start: v, goal: u, label: Label::N });
        moved.insert((u, v));
        moved.insert((v, u));
    }

    let mut train = Vec::with_capacity(n * (n - 1) - moved.len());
    for u in 0..n as u32 {
        for v in 0..n as u32 {
            if u == v || moved.contains(&(u, v)) {
                continue;
            }
            let label = if closure.is_reachable(u, v) { Label::Y } else { Label::N };
            train.push(PairExample { start: u, goal: v, label });
        }
    }

    Ok(DatasetSplit {
        train,
        test,
        provenance: SplitProvenance {
            graph_id: graph_id.to_string(),
            split_seed,
            num_nodes: n,
            pos_test,
            disc_test_requested: disc_test,
            disc_test_sampled: disc_count,
        },
    })
}

/// Token encoding: input is `(token(start), token(goal))`, target is the
/// label token.
pub fn encode_example(
    example: &PairExample,
    vocab: &Vocabulary,
) -> Result<([u32; 2], u32), DatasetError> {
    let start = vocab.node_token(example.start)?;
    let goal = vocab.node_token(example.goal)?;
    Ok(([start, goal], vocab.label_token(example.label)))
}

/// Y/N counts per subset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LabelCensus {
    pub train_y: usize,
    pub train_n: usize,
    pub test_y: usize,
    pub test_n: usize,
}

pub fn label_census(split: &DatasetSplit) -> LabelCensus {
    let count = |examples: &[PairExample], label: Label| {
        examples.iter().filter(|e| e.label == label).count()
    };
    LabelCensus {
        train_y: count(&split.train, Label::Y),
        train_n: count(&split.train, Label::N),
        test_y: count(&split.test, Label::Y),
        test_n: count(&split.test, Label::N),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Subset {
    Train,
    Test,
}

#[derive(Debug, Serialize, Deserialize)]
struct ExampleRecord {
    start: u32,
    goal: u32,
    label: Label,
    subset: Subset,
}

/// Writes a split as JSON lines: one header record with provenance, then one
/// record per example.
pub fn write_jsonl<W: Write>(split: &DatasetSplit, mut out: W) -> Result<(), DatasetError> {
    serde_json::to_writer(&mut out, &split.provenance)?;
    out.write_all(b"\n")?;
    for (examples, subset) in [(&split.train, Subset::Train), (&split.test, Subset::Test)] {
        for example in examples.iter() {
            let record = ExampleRecord {
                start: example.start,
                goal: example.goal,
                label: example.label,
                subset,
            };
            serde_json::to_writer(&mut out, &record)?;
            out.write_all(b"\n")?;
        }
    }
    Ok(())
}

/// Reads a split written by [`write_jsonl`].
pub fn read_jsonl<R: BufRead>(reader: R) -> Result<DatasetSplit, DatasetError> {
    let mut lines = reader.lines();
    let header = lines.next().ok_or(DatasetError::MissingHeader)??;
    let provenance: SplitProvenance = serde_json::from_str(&header)?;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ExampleRecord = serde_json::from_str(&line)?;
        let example =
            PairExample { start: record.start, goal: record.goal, label: record.label };
        match record.subset {
            Subset::Train => train.push(example),
            Subset::Test => test.push(example),
        }
    }
    Ok(DatasetSplit { train, test, provenance })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphs::{generate_chain_graph, generate_grid_graph, transitive_closure};
    use crate::seeded_rng;

    fn grid_split(n: usize, k: usize, pos: usize, disc: usize, seed: u64) -> DatasetSplit {
        let (graph, _) = generate_grid_graph(n, k).unwrap();
        let closure = transitive_closure(&graph);
        generate_train_test(&graph, &closure, "test-grid", pos, disc, seed, &mut seeded_rng(seed))
            .unwrap()
    }

    #[test]
    fn vocabulary_layout() {
        let vocab = build_vocabulary(100).unwrap();
        assert_eq!(vocab.size(), 102);
        let small = build_vocabulary(4).unwrap();
        assert_eq!(small.label_token(Label::Y), 4);
        assert_eq!(small.label_token(Label::N), 5);
        assert_eq!(build_vocabulary(800).unwrap().size(), 802);
        assert!(build_vocabulary(1).is_err());
    }

    #[test]
    fn default_grid_split_counts() {
        let split = grid_split(100, 2, DEFAULT_POS_TEST, DEFAULT_DISC_TEST, 7);
        let census = label_census(&split);
        assert_eq!(census.test_y, 40);
        assert_eq!(census.test_n, 120);
        assert_eq!(split.train.len(), 9900 - 160);
        assert_eq!(split.train.len() + split.test.len(), 100 * 99);
    }

    #[test]
    fn one_dimensional_grid_has_no_disconnected_pairs() {
        let split = grid_split(100, 1, 40, 40, 3);
        assert_eq!(split.test.len(), 80);
        assert_eq!(split.provenance.disc_test_sampled, 0);
        let census = label_census(&split);
        assert_eq!(census.test_y, 40);
        assert_eq!(census.test_n, 40);
    }

    #[test]
    fn degenerate_split_keeps_everything_in_train() {
        let split = grid_split(10, 2, 0, 0, 1);
        assert!(split.test.is_empty());
        assert_eq!(split.train.len(), 90);
    }

    #[test]
    fn split_is_disjoint_and_covers_all_pairs() {
        let split = grid_split(30, 2, 10, 10, 5);
        let mut seen = HashSet::new();
        for example in split.train.iter().chain(&split.test) {
            assert_ne!(example.start, example.goal);
            assert!(seen.insert((example.start, example.goal)), "duplicate pair");
        }
        assert_eq!(seen.len(), 30 * 29);
    }

    #[test]
    fn labels_match_oracle_and_reverses_are_paired() {
        let (graph, _) = generate_grid_graph(50, 2).unwrap();
        let closure = transitive_closure(&graph);
        let split = generate_train_test(
            &graph,
            &closure,
            "grid-n50-k2",
            20,
            20,
            9,
            &mut seeded_rng(9),
        )
        .unwrap();
        for example in split.train.iter().chain(&split.test) {
            let reachable = closure.is_reachable(example.start, example.goal);
            assert_eq!(example.label == Label::Y, reachable);
        }
        let test_pairs: HashSet<(u32, u32)> =
            split.test.iter().map(|e| (e.start, e.goal)).collect();
        for example in &split.test {
            if example.label == Label::Y {
                assert!(closure.dist(example.start, example.goal).unwrap() > 1);
                assert!(test_pairs.contains(&(example.goal, example.start)));
            }
        }
    }

    #[test]
    fn split_generation_is_seed_deterministic() {
        let a = grid_split(40, 2, 15, 15, 42);
        let b = grid_split(40, 2, 15, 15, 42);
        assert_eq!(a, b);
        let c = grid_split(40, 2, 15, 15, 43);
        assert_ne!(a.test, c.test);
    }

    #[test]
    fn insufficient_multi_hop_positives_is_an_error() {
        let (graph, _) = generate_grid_graph(4, 2).unwrap();
        let closure = transitive_closure(&graph);
        // Only (0, 3) is multi-hop in the 4-node grid.
        let err = generate_train_test(&graph, &closure, "g", 2, 0, 0, &mut seeded_rng(0))
            .unwrap_err();
        match err {
            DatasetError::InsufficientMultiHop { requested: 2, available: 1 } => {}
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn encoding_examples() {
        let vocab = build_vocabulary(4).unwrap();
        let ex = PairExample { start: 0, goal: 3, label: Label::Y };
        assert_eq!(encode_example(&ex, &vocab).unwrap(), ([0, 3], 4));
        let ex = PairExample { start: 3, goal: 0, label: Label::N };
        assert_eq!(encode_example(&ex, &vocab).unwrap(), ([3, 0], 5));
        let big = build_vocabulary(100).unwrap();
        let ex = PairExample { start: 17, goal: 42, label: Label::Y };
        assert_eq!(encode_example(&ex, &big).unwrap(), ([17, 42], 100));
        let bad = PairExample { start: 4, goal: 0, label: Label::Y };
        assert!(encode_example(&bad, &vocab).is_err());
    }

    #[test]
    fn census_on_reference_grid() {
        let split = grid_split(4, 2, 0, 0, 0);
        let census = label_census(&split);
        assert_eq!(census.train_y, 5);
        assert_eq!(census.train_n, 7);
        assert_eq!(census.test_y + census.test_n, 0);
    }

    #[test]
    fn census_on_two_chains() {
        let graph = generate_chain_graph(6, 2, &mut seeded_rng(2)).unwrap();
        let closure = transitive_closure(&graph);
        let split =
            generate_train_test(&graph, &closure, "chain", 0, 0, 2, &mut seeded_rng(2)).unwrap();
        assert_eq!(label_census(&split).train_y, 6);
    }

    #[test]
    fn jsonl_round_trip() {
        let split = grid_split(10, 2, 5, 5, 11);
        let mut buffer = Vec::new();
        write_jsonl(&split, &mut buffer).unwrap();
        let text = String::from_utf8(buffer.clone()).unwrap();
        assert!(text.lines().next().unwrap().contains("\"graph_id\""));
        assert!(text.contains("\"subset\":\"train\""));
        let back = read_jsonl(buffer.as_slice()).unwrap();
        assert_eq!(back, split);
    }
}
