// SPDX-License-Identifier: MIT OR Apache-2.0

//! s-Trace extraction by greedy best-first search.
//!
//! Starting from the root `H(L, n)`, the search repeatedly takes the
//! highest-scoring edge on the frontier; when the edge's source node is
//! new, that node's incoming edges join the frontier. Ties go to the edge
//! that is smallest in total [`EdgeId`] order. Because the stopping budget
//! never influences which edge is popped next, traces for increasing
//! budgets are prefixes of a single selection order.

use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{CompGraph, EdgeId, ImportanceScores, NodeId};
use crate::numerics::SeededRng;

/// Default relative-size grid (26 points from 1e-5 to 0.8).
pub const DEFAULT_GRID: [f64; 26] = [
    1e-5, 2e-5, 4e-5, 8e-5, 1e-4, 2e-4, 4e-4, 8e-4, 1e-3, 1.2e-3, 1.4e-3, 2e-3, 3e-3, 4e-3, 6e-3, 8e-3, 1e-2, 2e-2,
    4e-2, 6e-2, 8e-2, 1e-1, 2e-1, 4e-1, 6e-1, 8e-1,
];

/// Strictly ascending relative sizes in `(0, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SizeGrid(Vec<f64>);

impl SizeGrid {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidGrid("grid is empty".into()));
        }
        if let Some(v) = values.iter().find(|v| !(**v > 0.0 && **v < 1.0)) {
            return Err(Error::InvalidGrid(format!("{v} is outside (0, 1)")));
        }
        if values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidGrid("values must be strictly ascending".into()));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Edge budget for every grid point, see [`budget_for`].
    pub fn budgets(&self, total_edges: usize) -> Vec<usize> {
        self.0.iter().map(|&s| budget_for(s, total_edges)).collect()
    }
}

impl Default for SizeGrid {
    fn default() -> Self {
        Self(DEFAULT_GRID.to_vec())
    }
}

/// `max(1, ceil(rel * total))`. Products within 1e-9 (relative) of an
/// integer are treated as that integer, so e.g. `0.07 * 100` is 7, not 8.
pub fn budget_for(rel: f64, total_edges: usize) -> usize {
    let x = rel * total_edges as f64;
    let r = x.round();
    let b = if (x - r).abs() <= 1e-9 * r.max(1.0) {
        r
    } else {
        x.ceil()
    };
    (b as usize).max(1)
}

/// An extracted subgraph; `edges` are in selection order.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub edges: Vec<EdgeId>,
    pub nodes: BTreeSet<NodeId>,
    pub budget: usize,
    /// `|E_s| / |E|`
    pub rel_size: f64,
}

impl Trace {
    pub(crate) fn from_order(graph: &CompGraph, order: &[usize], budget: usize) -> Self {
        let shape = graph.shape();
        let mut nodes = BTreeSet::new();
        nodes.insert(shape.root());
        let edges: Vec<EdgeId> = order.iter().map(|&e| graph.edge(e)).collect();
        nodes.extend(edges.iter().map(|e| e.source()));
        Self {
            rel_size: edges.len() as f64 / graph.edge_count() as f64,
            edges,
            nodes,
            budget,
        }
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    score: f64,
    edge: usize,
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        // max-heap on score; among equal scores the smaller edge index wins
        self.score
            .total_cmp(&other.score)
            .then_with(|| other.edge.cmp(&self.edge))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Candidate {}

/// Greedy best-first selection order, stopping after `budget` edges or when
/// the frontier empties. Returns dense edge indices.
pub fn selection_order(graph: &CompGraph, scores: &[f64], budget: usize) -> Vec<usize> {
    let mut visited = vec![false; graph.node_count()];
    let root = graph.root_index();
    visited[root] = true;
    let mut queue: BinaryHeap<Candidate> = graph
        .incoming(root)
        .iter()
        .map(|&edge| Candidate {
            score: scores[edge],
            edge,
        })
        .collect();
    let mut order = Vec::with_capacity(budget.min(graph.edge_count()));
    while order.len() < budget {
        let Some(Candidate { edge, .. }) = queue.pop() else {
            break;
        };
        order.push(edge);
        let src = graph.source_index(edge);
        if !visited[src] {
            visited[src] = true;
            queue.extend(graph.incoming(src).iter().map(|&e| Candidate {
                score: scores[e],
                edge: e,
            }));
        }
    }
    order
}

pub fn extract_trace(graph: &CompGraph, scores: &ImportanceScores, budget: usize) -> Trace {
    let order = selection_order(graph, scores.values(), budget);
    Trace::from_order(graph, &order, budget)
}

/// One search pass with a snapshot at every grid budget; the returned
/// traces are nested.
pub fn extract_trace_grid(graph: &CompGraph, scores: &ImportanceScores, grid: &SizeGrid) -> Vec<Trace> {
    traces_for_budgets(graph, scores.values(), &grid.budgets(graph.edge_count()))
}

pub(crate) fn traces_for_budgets(graph: &CompGraph, scores: &[f64], budgets: &[usize]) -> Vec<Trace> {
    let max = budgets.iter().copied().max().unwrap_or(0);
    let order = selection_order(graph, scores, max);
    budgets
        .iter()
        .map(|&b| Trace::from_order(graph, &order[..b.min(order.len())], b))
        .collect()
}

/// Baseline scores: one uniform draw per edge in index order, plus one for
/// every residual and MLP edge so they always outrank attention edges.
pub fn random_scores(graph: &CompGraph, seed: u64) -> ImportanceScores {
    let mut rng = SeededRng::new(seed);
    let values = graph
        .edges()
        .iter()
        .map(|e| {
            let u = rng.next_f64();
            if matches!(e, EdgeId::Attn { .. }) {
                u
            } else {
                u + 1.0
            }
        })
        .collect();
    ImportanceScores::from_values(values)
}

pub fn extract_random_trace(graph: &CompGraph, budget: usize, seed: u64) -> Trace {
    extract_trace(graph, &random_scores(graph, seed), budget)
}

pub fn extract_random_trace_grid(graph: &CompGraph, grid: &SizeGrid, seed: u64) -> Vec<Trace> {
    extract_trace_grid(graph, &random_scores(graph, seed), grid)
}

/// JSON dump of one trace. Edges use the text encoding of [`EdgeId`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceDump {
    pub model_hash: String,
    pub n: usize,
    pub budget: usize,
    pub rel_size: f64,
    pub edges: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instance_id: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid_s_rel: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layers: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heads: Option<usize>,
}

impl TraceDump {
    pub fn new(model_hash: &str, n: usize, trace: &Trace) -> Self {
        Self {
            model_hash: model_hash.to_string(),
            n,
            budget: trace.budget,
            rel_size: trace.rel_size,
            edges: trace.edges.iter().map(|e| e.to_string()).collect(),
            instance_id: None,
            grid_s_rel: None,
            layers: None,
            heads: None,
        }
    }

    pub fn parse_edges(&self) -> Result<Vec<EdgeId>> {
        self.edges.iter().map(|s| s.parse()).collect()
    }
}
