// SPDX-License-Identifier: MIT OR Apache-2.0

//! Structural summaries of traces: where in depth their edges sit, which
//! edge types they use, and how concentrated they are on few components.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::graph::{component_of, ComponentId, EdgeId, GraphShape};

/// Fractions of a trace's edges per edge type.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TypeComposition {
    pub attention: f64,
    pub mlp: f64,
    pub residual: f64,
}

/// Per-size composition summary.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositionReport {
    pub rel_size: f64,
    pub layer_bins: Vec<f64>,
    pub types: TypeComposition,
}

/// Depth bin of an edge: `floor((layer - 1) * n_bins / L)`.
pub fn layer_bin(layer: usize, n_layers: usize, n_bins: usize) -> usize {
    ((layer - 1) * n_bins / n_layers).min(n_bins - 1)
}

pub fn layer_composition(edges: &[EdgeId], n_layers: usize, n_bins: usize) -> Result<Vec<f64>> {
    if n_bins == 0 {
        return Err(Error::InvalidGrid("n_bins must be >= 1".into()));
    }
    if edges.is_empty() {
        return Err(Error::EmptyInput("trace"));
    }
    let mut counts = vec![0usize; n_bins];
    for e in edges {
        counts[layer_bin(e.layer(), n_layers, n_bins)] += 1;
    }
    let total = edges.len() as f64;
    Ok(counts.into_iter().map(|c| c as f64 / total).collect())
}

pub fn type_composition(edges: &[EdgeId]) -> Result<TypeComposition> {
    if edges.is_empty() {
        return Err(Error::EmptyInput("trace"));
    }
    let (mut a, mut m, mut r) = (0usize, 0usize, 0usize);
    for e in edges {
        match e {
            EdgeId::Attn { .. } => a += 1,
            EdgeId::Mlp { .. } => m += 1,
            EdgeId::ResidAttn { .. } | EdgeId::ResidMlp { .. } => r += 1,
        }
    }
    let total = edges.len() as f64;
    Ok(TypeComposition {
        attention: a as f64 / total,
        mlp: m as f64 / total,
        residual: r as f64 / total,
    })
}

/// Edge-type fractions of the complete graph, from closed-form counts.
pub fn full_graph_type_composition(shape: &GraphShape) -> TypeComposition {
    let total = shape.edge_count() as f64;
    TypeComposition {
        attention: shape.attn_edge_count() as f64 / total,
        mlp: shape.mlp_edge_count() as f64 / total,
        residual: shape.residual_edge_count() as f64 / total,
    }
}

pub fn composition_report(
    edges: &[EdgeId],
    rel_size: f64,
    n_layers: usize,
    n_bins: usize,
) -> Result<CompositionReport> {
    Ok(CompositionReport {
        rel_size,
        layer_bins: layer_composition(edges, n_layers, n_bins)?,
        types: type_composition(edges)?,
    })
}

/// Cumulative edge allocation over components ranked by usage.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyCurve {
    /// Every possible component with its edge count, most used first.
    pub ranked: Vec<(ComponentId, usize)>,
    /// `(x, y)` for `x = 0.01, 0.02, ..., 1.00`.
    pub points: Vec<(f64, f64)>,
}

impl FrequencyCurve {
    /// Ranks `counts` (descending, ties by component id) over the given
    /// component universe.
    pub fn from_counts(mut counts: Vec<(ComponentId, usize)>) -> Result<Self> {
        let total: usize = counts.iter().map(|(_, c)| c).sum();
        if total == 0 {
            return Err(Error::EmptyInput("traces"));
        }
        counts.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        let mut curve = Self {
            ranked: counts,
            points: Vec::with_capacity(100),
        };
        curve.points = (1..=100usize)
            .map(|pct| (pct as f64 / 100.0, curve.cumulative(curve.top_for_percent(pct))))
            .collect();
        Ok(curve)
    }

    /// `ceil(pct/100 * #components)`, in exact integer arithmetic.
    fn top_for_percent(&self, pct: usize) -> usize {
        (pct * self.ranked.len()).div_ceil(100)
    }

    /// `y` at `x = pct / 100`.
    pub fn at_percent(&self, pct: usize) -> f64 {
        self.cumulative(self.top_for_percent(pct))
    }

    /// Cumulative share of the `top` most used components.
    pub fn cumulative(&self, top: usize) -> f64 {
        let total: usize = self.ranked.iter().map(|(_, c)| c).sum();
        let covered: usize = self.ranked.iter().take(top).map(|(_, c)| c).sum();
        covered as f64 / total as f64
    }
}

/// Component usage across a set of traces from the same model shape. The
/// x axis is normalized by all `L*N_H + 3L` possible components.
pub fn component_frequency_curve<'a, I>(traces: I, n_layers: usize, n_heads: usize) -> Result<FrequencyCurve>
where
    I: IntoIterator<Item = &'a [EdgeId]>,
{
    let mut counts: BTreeMap<ComponentId, usize> = BTreeMap::new();
    for layer in 1..=n_layers {
        for head in 1..=n_heads {
            counts.insert(ComponentId::Attn { layer, head }, 0);
        }
        counts.insert(ComponentId::Mlp { layer }, 0);
        counts.insert(ComponentId::ResidAttn { layer }, 0);
        counts.insert(ComponentId::ResidMlp { layer }, 0);
    }
    for trace in traces {
        for e in trace {
            let c = counts
                .get_mut(&component_of(e))
                .ok_or_else(|| Error::InvalidEdge(format!("{e} outside model shape")))?;
            *c += 1;
        }
    }
    FrequencyCurve::from_counts(counts.into_iter().collect())
}
