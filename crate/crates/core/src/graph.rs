//! Per-conversation typed directed graphs and their attention edge weights.
//!
//! Vertices are the visible turns. Every non-root turn is connected to its
//! parent in both temporal directions (missing reply metadata degrades to a
//! previous-turn chain), and consecutive turns by the same user are also
//! connected both ways. An edge's relation combines the ordered speaker pair
//! with its temporal direction and is hashed into a fixed number of
//! parameter buckets.
//!
//! Edge weights are bilinear attention scores `v_i . (W_e v_j)`,
//! softmax-normalized per vertex over {self} U in-neighbors, so each
//! vertex's incoming weight mass is exactly 1.

use crate::error::{Error, Result};
use crate::hashing::fnv1a64;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::corpus::Turn;
use ndarray::Array2;
use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

/// Temporal direction of an edge: forward points from an earlier turn to a
/// later one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Direction {
    Forward,
    Backward,
}

/// Edge label: ordered per-conversation speaker pair plus temporal
/// direction, bucketed into `[0, bucket_count)` for parameter sharing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Relation {
    pub user_pair: (usize, usize),
    pub direction: Direction,
    pub bucket: usize,
}

impl Relation {
    /// Stable bucket assignment: same (pair, direction) always maps to the
    /// same bucket, across runs and platforms.
    pub fn bucket_for(user_pair: (usize, usize), direction: Direction, bucket_count: usize) -> usize {
        let mut bytes = Vec::with_capacity(17);
        bytes.extend_from_slice(&(user_pair.0 as u64).to_le_bytes());
        bytes.extend_from_slice(&(user_pair.1 as u64).to_le_bytes());
        bytes.push(match direction {
            Direction::Forward => 0,
            Direction::Backward => 1,
        });
        (fnv1a64(&bytes) % bucket_count as u64) as usize
    }

    pub fn new(user_pair: (usize, usize), direction: Direction, bucket_count: usize) -> Self {
        Relation {
            user_pair,
            direction,
            bucket: Self::bucket_for(user_pair, direction, bucket_count),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub relation: Relation,
}

/// Topology of one conversation prefix: shared across all feature channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConversationGraph {
    pub vertex_count: usize,
    /// Per-vertex speaker index (first-appearance order).
    pub speakers: Vec<usize>,
    /// Deduplicated edges sorted by (src, dst).
    pub edges: Vec<Edge>,
    /// For each vertex: incoming (source, relation bucket) pairs sorted by
    /// source index. The softmax over {self} U this list defines the alpha
    /// weights.
    in_neighbors: Vec<Vec<(usize, usize)>>,
}

impl ConversationGraph {
    /// Assemble a graph from explicit labeled edges (deduplicating on
    /// (src, dst)). `build_graph` derives the edges from turns; tests can
    /// inject their own.
    pub fn from_labeled_edges(vertex_count: usize, speakers: Vec<usize>, edges: Vec<Edge>) -> Self {
        assert_eq!(speakers.len(), vertex_count);
        let mut dedup: BTreeMap<(usize, usize), Edge> = BTreeMap::new();
        for e in edges {
            assert!(e.src < vertex_count && e.dst < vertex_count, "edge out of range");
            assert_ne!(e.src, e.dst, "self loops are implicit");
            dedup.insert((e.src, e.dst), e);
        }
        let edges: Vec<Edge> = dedup.into_values().collect();
        let mut in_neighbors = vec![Vec::new(); vertex_count];
        for e in &edges {
            in_neighbors[e.dst].push((e.src, e.relation.bucket));
        }
        for list in &mut in_neighbors {
            list.sort_unstable();
        }
        ConversationGraph {
            vertex_count,
            speakers,
            edges,
            in_neighbors,
        }
    }

    pub fn in_neighbors(&self, vertex: usize) -> &[(usize, usize)] {
        &self.in_neighbors[vertex]
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }
}

/// Map each turn's user to a per-conversation speaker index by first
/// appearance.
pub fn speaker_indices(turns: &[Turn]) -> Vec<usize> {
    let mut order: BTreeMap<&str, usize> = BTreeMap::new();
    let mut out = Vec::with_capacity(turns.len());
    for turn in turns {
        let next = order.len();
        let idx = *order.entry(turn.user_id.as_str()).or_insert(next);
        out.push(idx);
    }
    out
}

/// Build the conversation topology over the given turns.
///
/// Edges: reply links in both directions (a turn without a parent_id is
/// treated as replying to the previous turn) plus both directions between
/// consecutive turns of the same user. Duplicate (src, dst) pairs collapse;
/// the relation label is fully determined by the pair, so nothing is lost.
pub fn build_graph(turns: &[Turn], bucket_count: usize) -> ConversationGraph {
    assert!(bucket_count > 0, "need at least one relation bucket");
    let n = turns.len();
    let speakers = speaker_indices(turns);
    let mut pairs: BTreeSet<(usize, usize)> = BTreeSet::new();

    // Reply edges, child -> parent and parent -> child.
    let id_index: BTreeMap<&str, usize> = turns
        .iter()
        .enumerate()
        .map(|(i, t)| (t.turn_id.as_str(), i))
        .collect();
    for (i, turn) in turns.iter().enumerate().skip(1) {
        let parent = turn
            .parent_id
            .as_deref()
            .and_then(|p| id_index.get(p).copied())
            .filter(|&p| p < i)
            .unwrap_or(i - 1);
        pairs.insert((i, parent));
        pairs.insert((parent, i));
    }

    // Consecutive same-user edges, both directions.
    let mut last_by_speaker: BTreeMap<usize, usize> = BTreeMap::new();
    for (i, &speaker) in speakers.iter().enumerate() {
        if let Some(&prev) = last_by_speaker.get(&speaker) {
            pairs.insert((i, prev));
            pairs.insert((prev, i));
        }
        last_by_speaker.insert(speaker, i);
    }

    let edges = pairs
        .into_iter()
        .map(|(src, dst)| {
            let direction = if src < dst {
                Direction::Forward
            } else {
                Direction::Backward
            };
            Edge {
                src,
                dst,
                relation: Relation::new((speakers[src], speakers[dst]), direction, bucket_count),
            }
        })
        .collect();
    ConversationGraph::from_labeled_edges(n, speakers, edges)
}

/// A topology plus the per-vertex attention weights.
#[derive(Debug, Clone)]
pub struct WeightedGraph<T: Scalar> {
    pub topology: ConversationGraph,
    /// alpha_ii per vertex.
    pub self_weight: Vec<T>,
    /// alpha_ij per vertex, aligned with `topology.in_neighbors(i)`.
    pub in_weights: Vec<Vec<T>>,
}

impl<T: Scalar> WeightedGraph<T> {
    /// Total incoming weight (self + neighbors) of a vertex.
    pub fn incoming_sum(&self, vertex: usize) -> T {
        self.in_weights[vertex]
            .iter()
            .fold(self.self_weight[vertex], |acc, &w| acc + w)
    }

    /// Debug export: one `src dst bucket weight` line per edge, with the
    /// self weight written as a `i i self alpha` line.
    pub fn write_edge_list<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for v in 0..self.topology.vertex_count {
            writeln!(out, "{v}\t{v}\tself\t{}", self.self_weight[v].to_f64_lossy())?;
            for ((src, bucket), w) in self
                .topology
                .in_neighbors(v)
                .iter()
                .zip(&self.in_weights[v])
            {
                writeln!(out, "{src}\t{v}\t{bucket}\t{}", w.to_f64_lossy())?;
            }
        }
        Ok(())
    }
}

/// Attention rows on the tape, one per vertex: `rows[i]` is a
/// `1 x (1 + in_degree)` softmax row ordered self-first, then in-neighbors
/// in `in_neighbors(i)` order.
pub struct AlphaVars {
    pub rows: Vec<Var>,
}

/// Build the softmax attention rows for every vertex from a stacked vertex
/// matrix (one row per vertex) and the bilinear weight `w_edge`. This is the
/// single implementation used for both training and the plain
/// [`compute_edge_weights`] wrapper.
pub fn attention_alpha_vars<T: Scalar>(
    tape: &Tape<T>,
    graph: &ConversationGraph,
    x: Var,
    w_edge: Var,
) -> AlphaVars {
    let projected = tape.matmul(x, w_edge);
    let rows = (0..graph.vertex_count)
        .map(|i| {
            let mut idx = vec![i];
            idx.extend(graph.in_neighbors(i).iter().map(|&(j, _)| j));
            let targets = tape.gather_rows(x, idx);
            let logits = tape.matmul(tape.row(projected, i), tape.transpose(targets));
            tape.row_softmax(logits, None)
        })
        .collect();
    AlphaVars { rows }
}

/// Compute the attention-weighted graph for one channel.
///
/// `vertices` holds one feature row per vertex; `w_edge` is the bilinear
/// similarity parameter (square, matching the feature dim).
pub fn compute_edge_weights<T: Scalar>(
    graph: &ConversationGraph,
    vertices: &Array2<T>,
    w_edge: &Array2<T>,
) -> Result<WeightedGraph<T>> {
    if vertices.nrows() != graph.vertex_count {
        return Err(Error::Dimension(format!(
            "expected {} vertex rows, got {}",
            graph.vertex_count,
            vertices.nrows()
        )));
    }
    if w_edge.nrows() != vertices.ncols() || w_edge.ncols() != vertices.ncols() {
        return Err(Error::Dimension(format!(
            "edge weight matrix is {}x{}, vertices have dim {}",
            w_edge.nrows(),
            w_edge.ncols(),
            vertices.ncols()
        )));
    }
    if vertices.iter().any(|v| !v.is_finite()) || w_edge.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("graph attention inputs".into()));
    }

    let tape = Tape::new();
    let x = tape.leaf(vertices.clone());
    let w = tape.leaf(w_edge.clone());
    let alphas = attention_alpha_vars(&tape, graph, x, w);

    let mut self_weight = Vec::with_capacity(graph.vertex_count);
    let mut in_weights = Vec::with_capacity(graph.vertex_count);
    for (i, row) in alphas.rows.iter().enumerate() {
        let values = tape.value(*row);
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("attention logits at vertex {i}")));
        }
        self_weight.push(values[(0, 0)]);
        in_weights.push((1..values.ncols()).map(|j| values[(0, j)]).collect());
    }
    Ok(WeightedGraph {
        topology: graph.clone(),
        self_weight,
        in_weights,
    })
}
