// SPDX-License-Identifier: MIT OR Apache-2.0

//! Token-level computational graph over a forward pass.
//!
//! Nodes are the residual states `H(l, i)` for `l in 0..=L` and the
//! post-attention states `Z(l, i)` for `l in 1..=L`. Edges:
//!
//! | kind        | source        | target     |
//! |-------------|---------------|------------|
//! | `Attn`      | `H(l-1, j)`   | `Z(l, i)`  |  one per head, `j <= i`
//! | `ResidAttn` | `H(l-1, i)`   | `Z(l, i)`  |
//! | `Mlp`       | `Z(l, i)`     | `H(l, i)`  |
//! | `ResidMlp`  | `Z(l, i)`     | `H(l, i)`  |
//!
//! Only causal attention edges exist, so `|E| = L * (N_H * n(n+1)/2 + 3n)`.
//! Edges are densely indexed in their total order (layer, kind, target,
//! source, head), which is also the tie-break order used by trace search.
//! All layer, token and head numbers are 1-based except `H(0, _)`.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::ForwardRecord;
use crate::numerics::l1_norm;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NodeKind {
    H,
    Z,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId {
    pub kind: NodeKind,
    pub layer: usize,
    pub token: usize,
}

impl NodeId {
    pub fn h(layer: usize, token: usize) -> Self {
        Self {
            kind: NodeKind::H,
            layer,
            token,
        }
    }

    pub fn z(layer: usize, token: usize) -> Self {
        Self {
            kind: NodeKind::Z,
            layer,
            token,
        }
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let k = match self.kind {
            NodeKind::H => "H",
            NodeKind::Z => "Z",
        };
        write!(f, "{k}:l{}:{}", self.layer, self.token)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EdgeKind {
    Attn,
    Mlp,
    ResidAttn,
    ResidMlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EdgeId {
    Attn {
        layer: usize,
        head: usize,
        target: usize,
        source: usize,
    },
    Mlp {
        layer: usize,
        token: usize,
    },
    ResidAttn {
        layer: usize,
        token: usize,
    },
    ResidMlp {
        layer: usize,
        token: usize,
    },
}

impl EdgeId {
    pub fn kind(&self) -> EdgeKind {
        match self {
            EdgeId::Attn { .. } => EdgeKind::Attn,
            EdgeId::Mlp { .. } => EdgeKind::Mlp,
            EdgeId::ResidAttn { .. } => EdgeKind::ResidAttn,
            EdgeId::ResidMlp { .. } => EdgeKind::ResidMlp,
        }
    }

    pub fn layer(&self) -> usize {
        match *self {
            EdgeId::Attn { layer, .. }
            | EdgeId::Mlp { layer, .. }
            | EdgeId::ResidAttn { layer, .. }
            | EdgeId::ResidMlp { layer, .. } => layer,
        }
    }

    pub fn target_token(&self) -> usize {
        match *self {
            EdgeId::Attn { target, .. } => target,
            EdgeId::Mlp { token, .. } | EdgeId::ResidAttn { token, .. } | EdgeId::ResidMlp { token, .. } => token,
        }
    }

    pub fn is_residual(&self) -> bool {
        matches!(self, EdgeId::ResidAttn { .. } | EdgeId::ResidMlp { .. })
    }

    pub fn source(&self) -> NodeId {
        match *self {
            EdgeId::Attn { layer, source, .. } => NodeId::h(layer - 1, source),
            EdgeId::ResidAttn { layer, token } => NodeId::h(layer - 1, token),
            EdgeId::Mlp { layer, token } | EdgeId::ResidMlp { layer, token } => NodeId::z(layer, token),
        }
    }

    pub fn target(&self) -> NodeId {
        match *self {
            EdgeId::Attn { layer, target, .. } => NodeId::z(layer, target),
            EdgeId::ResidAttn { layer, token } => NodeId::z(layer, token),
            EdgeId::Mlp { layer, token } | EdgeId::ResidMlp { layer, token } => NodeId::h(layer, token),
        }
    }

    fn sort_key(&self) -> (usize, EdgeKind, usize, usize, usize) {
        match *self {
            EdgeId::Attn {
                layer,
                head,
                target,
                source,
            } => (layer, EdgeKind::Attn, target, source, head),
            EdgeId::Mlp { layer, token } => (layer, EdgeKind::Mlp, token, 0, 0),
            EdgeId::ResidAttn { layer, token } => (layer, EdgeKind::ResidAttn, token, 0, 0),
            EdgeId::ResidMlp { layer, token } => (layer, EdgeKind::ResidMlp, token, 0, 0),
        }
    }
}

impl Ord for EdgeId {
    fn cmp(&self, other: &Self) -> Ordering {
        self.sort_key().cmp(&other.sort_key())
    }
}

impl PartialOrd for EdgeId {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for EdgeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            EdgeId::Attn {
                layer,
                head,
                target,
                source,
            } => write!(f, "A:l{layer}:h{head}:{source}->{target}"),
            EdgeId::Mlp { layer, token } => write!(f, "M:l{layer}:{token}"),
            EdgeId::ResidAttn { layer, token } => write!(f, "RA:l{layer}:{token}"),
            EdgeId::ResidMlp { layer, token } => write!(f, "RM:l{layer}:{token}"),
        }
    }
}

impl FromStr for EdgeId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidEdge(s.to_string());
        let num = |t: &str, prefix: &str| -> Result<usize> {
            t.strip_prefix(prefix).and_then(|v| v.parse().ok()).ok_or_else(bad)
        };
        let parts: Vec<&str> = s.split(':').collect();
        match parts.as_slice() {
            ["A", l, h, route] => {
                let (j, i) = route.split_once("->").ok_or_else(bad)?;
                Ok(EdgeId::Attn {
                    layer: num(l, "l")?,
                    head: num(h, "h")?,
                    source: num(j, "")?,
                    target: num(i, "")?,
                })
            }
            [kind, l, i] => {
                let (layer, token) = (num(l, "l")?, num(i, "")?);
                match *kind {
                    "M" => Ok(EdgeId::Mlp { layer, token }),
                    "RA" => Ok(EdgeId::ResidAttn { layer, token }),
                    "RM" => Ok(EdgeId::ResidMlp { layer, token }),
                    _ => Err(bad()),
                }
            }
            _ => Err(bad()),
        }
    }
}

/// Token-collapsed architectural component an edge belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ComponentId {
    Attn { layer: usize, head: usize },
    Mlp { layer: usize },
    ResidAttn { layer: usize },
    ResidMlp { layer: usize },
}

impl fmt::Display for ComponentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ComponentId::Attn { layer, head } => write!(f, "attn:l{layer}:h{head}"),
            ComponentId::Mlp { layer } => write!(f, "mlp:l{layer}"),
            ComponentId::ResidAttn { layer } => write!(f, "resid-attn:l{layer}"),
            ComponentId::ResidMlp { layer } => write!(f, "resid-mlp:l{layer}"),
        }
    }
}

pub fn component_of(edge: &EdgeId) -> ComponentId {
    match *edge {
        EdgeId::Attn { layer, head, .. } => ComponentId::Attn { layer, head },
        EdgeId::Mlp { layer, .. } => ComponentId::Mlp { layer },
        EdgeId::ResidAttn { layer, .. } => ComponentId::ResidAttn { layer },
        EdgeId::ResidMlp { layer, .. } => ComponentId::ResidMlp { layer },
    }
}

/// Graph dimensions. All counts are closed-form, so very large shapes can
/// be reasoned about without materializing a [`CompGraph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GraphShape {
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_tokens: usize,
}

impl GraphShape {
    pub fn new(n_layers: usize, n_heads: usize, n_tokens: usize) -> Self {
        Self {
            n_layers,
            n_heads,
            n_tokens,
        }
    }

    pub fn node_count(&self) -> usize {
        self.n_tokens * (2 * self.n_layers + 1)
    }

    pub fn attn_edges_per_layer(&self) -> usize {
        self.n_heads * self.n_tokens * (self.n_tokens + 1) / 2
    }

    fn edges_per_layer(&self) -> usize {
        self.attn_edges_per_layer() + 3 * self.n_tokens
    }

    pub fn attn_edge_count(&self) -> usize {
        self.n_layers * self.attn_edges_per_layer()
    }

    pub fn mlp_edge_count(&self) -> usize {
        self.n_layers * self.n_tokens
    }

    pub fn residual_edge_count(&self) -> usize {
        2 * self.n_layers * self.n_tokens
    }

    pub fn edge_count(&self) -> usize {
        self.n_layers * self.edges_per_layer()
    }

    /// Number of distinct [`ComponentId`]s: `L*N_H + L + 2L`.
    pub fn component_count(&self) -> usize {
        self.n_layers * (self.n_heads + 3)
    }

    pub fn root(&self) -> NodeId {
        NodeId::h(self.n_layers, self.n_tokens)
    }

    pub fn contains_node(&self, node: &NodeId) -> bool {
        let tok_ok = (1..=self.n_tokens).contains(&node.token);
        match node.kind {
            NodeKind::H => tok_ok && node.layer <= self.n_layers,
            NodeKind::Z => tok_ok && (1..=self.n_layers).contains(&node.layer),
        }
    }

    pub fn contains(&self, edge: &EdgeId) -> bool {
        let layer_ok = (1..=self.n_layers).contains(&edge.layer());
        let tok_ok = (1..=self.n_tokens).contains(&edge.target_token());
        match *edge {
            EdgeId::Attn {
                head, target, source, ..
            } => layer_ok && tok_ok && (1..=self.n_heads).contains(&head) && (1..=target).contains(&source),
            _ => layer_ok && tok_ok,
        }
    }

    pub fn node_index(&self, node: &NodeId) -> usize {
        let n = self.n_tokens;
        match node.kind {
            NodeKind::H => node.layer * n + node.token - 1,
            NodeKind::Z => (self.n_layers + 1) * n + (node.layer - 1) * n + node.token - 1,
        }
    }

    pub fn node_at(&self, index: usize) -> NodeId {
        let n = self.n_tokens;
        let h_count = (self.n_layers + 1) * n;
        if index < h_count {
            NodeId::h(index / n, index % n + 1)
        } else {
            let r = index - h_count;
            NodeId::z(r / n + 1, r % n + 1)
        }
    }

    /// Dense index of `edge` in total EdgeId order. Caller guarantees
    /// `self.contains(edge)`.
    pub fn edge_index(&self, edge: &EdgeId) -> usize {
        let (nh, n) = (self.n_heads, self.n_tokens);
        let attn = self.attn_edges_per_layer();
        let base = (edge.layer() - 1) * self.edges_per_layer();
        match *edge {
            EdgeId::Attn {
                head, target, source, ..
            } => base + nh * (target - 1) * target / 2 + (source - 1) * nh + head - 1,
            EdgeId::Mlp { token, .. } => base + attn + token - 1,
            EdgeId::ResidAttn { token, .. } => base + attn + n + token - 1,
            EdgeId::ResidMlp { token, .. } => base + attn + 2 * n + token - 1,
        }
    }

    pub fn edge_at(&self, index: usize) -> EdgeId {
        let (nh, n) = (self.n_heads, self.n_tokens);
        let attn = self.attn_edges_per_layer();
        let layer = index / self.edges_per_layer() + 1;
        let r = index % self.edges_per_layer();
        if r < attn {
            // largest t (0-based target) with nh * t(t+1)/2 <= r
            let m = r / nh;
            let mut t = (((8 * m + 1) as f64).sqrt() as usize).saturating_sub(1) / 2;
            while (t + 1) * (t + 2) / 2 <= m {
                t += 1;
            }
            while t * (t + 1) / 2 > m {
                t -= 1;
            }
            let within = r - nh * t * (t + 1) / 2;
            EdgeId::Attn {
                layer,
                head: within % nh + 1,
                target: t + 1,
                source: within / nh + 1,
            }
        } else {
            let r = r - attn;
            let token = r % n + 1;
            match r / n {
                0 => EdgeId::Mlp { layer, token },
                1 => EdgeId::ResidAttn { layer, token },
                _ => EdgeId::ResidMlp { layer, token },
            }
        }
    }

    /// Incoming edges of `node` in ascending EdgeId order.
    pub fn incoming(&self, node: &NodeId) -> Vec<EdgeId> {
        let (l, i) = (node.layer, node.token);
        match node.kind {
            NodeKind::H if l == 0 => Vec::new(),
            NodeKind::H => vec![
                EdgeId::Mlp { layer: l, token: i },
                EdgeId::ResidMlp { layer: l, token: i },
            ],
            NodeKind::Z => {
                let mut v = Vec::with_capacity(1 + self.n_heads * i);
                for source in 1..=i {
                    for head in 1..=self.n_heads {
                        v.push(EdgeId::Attn {
                            layer: l,
                            head,
                            target: i,
                            source,
                        });
                    }
                }
                v.push(EdgeId::ResidAttn { layer: l, token: i });
                v
            }
        }
    }
}

/// Materialized graph: edge list in index order plus incoming adjacency.
#[derive(Debug, Clone)]
pub struct CompGraph {
    shape: GraphShape,
    edges: Vec<EdgeId>,
    sources: Vec<usize>,
    targets: Vec<usize>,
    incoming: Vec<Vec<usize>>,
}

impl CompGraph {
    pub fn from_shape(shape: GraphShape) -> Self {
        let edges: Vec<EdgeId> = (0..shape.edge_count()).map(|e| shape.edge_at(e)).collect();
        let sources = edges.iter().map(|e| shape.node_index(&e.source())).collect();
        let targets: Vec<usize> = edges.iter().map(|e| shape.node_index(&e.target())).collect();
        let mut incoming = vec![Vec::new(); shape.node_count()];
        for (idx, &t) in targets.iter().enumerate() {
            incoming[t].push(idx);
        }
        Self {
            shape,
            edges,
            sources,
            targets,
            incoming,
        }
    }

    pub fn shape(&self) -> GraphShape {
        self.shape
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn node_count(&self) -> usize {
        self.incoming.len()
    }

    pub fn edges(&self) -> &[EdgeId] {
        &self.edges
    }

    pub fn edge(&self, index: usize) -> EdgeId {
        self.edges[index]
    }

    pub fn root_index(&self) -> usize {
        self.shape.node_index(&self.shape.root())
    }

    pub fn source_index(&self, edge: usize) -> usize {
        self.sources[edge]
    }

    pub fn target_index(&self, edge: usize) -> usize {
        self.targets[edge]
    }

    /// Incoming edge indices of node `node`, ascending.
    pub fn incoming(&self, node: usize) -> &[usize] {
        &self.incoming[node]
    }
}

/// Builds the graph for a recorded forward pass.
pub fn build_graph(record: &ForwardRecord) -> Result<CompGraph> {
    record.validate()?;
    Ok(CompGraph::from_shape(GraphShape::new(
        record.n_layers,
        record.n_heads,
        record.n_tokens,
    )))
}

/// Node-normalized edge scores, indexed by dense edge index.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceScores {
    values: Vec<f64>,
}

impl ImportanceScores {
    pub fn from_values(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, edge_index: usize) -> f64 {
        self.values[edge_index]
    }
}

/// L1 norm of every edge vector.
pub fn edge_norms(record: &ForwardRecord, graph: &CompGraph) -> Vec<f64> {
    let s = graph.shape();
    // ||a * o||_1 = a * ||o||_1 with a >= 0
    let head_l1: Vec<f64> = record.head_out.chunks_exact(record.d_model).map(l1_norm).collect();
    graph
        .edges()
        .iter()
        .map(|e| match *e {
            EdgeId::Attn {
                layer,
                head,
                target,
                source,
            } => {
                let idx = ((layer - 1) * s.n_heads + head - 1) * s.n_tokens + source - 1;
                record.attn_weight(layer, head, target, source) * head_l1[idx]
            }
            EdgeId::Mlp { layer, token } => l1_norm(record.mlp_contribution(layer, token)),
            EdgeId::ResidAttn { layer, token } => l1_norm(record.h(layer - 1, token)),
            EdgeId::ResidMlp { layer, token } => l1_norm(record.z(layer, token)),
        })
        .collect()
}

/// Normalizes per-edge magnitudes over the incoming set of each target node;
/// a node whose incoming magnitudes are all zero gets uniform scores.
pub fn normalize_by_target(graph: &CompGraph, norms: &[f64]) -> ImportanceScores {
    let mut values = vec![0.0; norms.len()];
    for node in 0..graph.node_count() {
        let inc = graph.incoming(node);
        if inc.is_empty() {
            continue;
        }
        let total: f64 = inc.iter().map(|&e| norms[e]).sum();
        for &e in inc {
            values[e] = if total > 0.0 {
                norms[e] / total
            } else {
                1.0 / inc.len() as f64
            };
        }
    }
    ImportanceScores { values }
}

/// `I(e) = ||v_e||_1 / sum_{e' -> v} ||v_e'||_1`.
pub fn importance(record: &ForwardRecord, graph: &CompGraph) -> ImportanceScores {
    normalize_by_target(graph, &edge_norms(record, graph))
}
