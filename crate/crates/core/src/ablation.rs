// SPDX-License-Identifier: MIT OR Apache-2.0

//! Masked re-inference.
//!
//! The whole forward pass is recomputed with every edge outside the kept
//! set zeroed. Attention weights are recomputed from the masked upstream
//! states. In [`MaskMode::AfterSoftmax`] a dropped attention edge is
//! multiplied by zero after normalization; in [`MaskMode::BeforeSoftmax`]
//! its logit is sent to `-inf` so the remaining weights renormalize, and a
//! head with no surviving source contributes nothing.

use crate::error::{Error, Result};
use crate::graph::{EdgeId, GraphShape};
use crate::model::{Model, TokenSequence};
use crate::numerics::softmax_in_place;
use crate::trace::Trace;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MaskMode {
    #[default]
    AfterSoftmax,
    BeforeSoftmax,
}

/// Binary keep/drop decision for every edge of a graph shape.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeMask {
    shape: GraphShape,
    keep: Vec<bool>,
    pub mode: MaskMode,
}

impl EdgeMask {
    pub fn all(shape: GraphShape) -> Self {
        Self {
            shape,
            keep: vec![true; shape.edge_count()],
            mode: MaskMode::default(),
        }
    }

    pub fn none(shape: GraphShape) -> Self {
        Self {
            shape,
            keep: vec![false; shape.edge_count()],
            mode: MaskMode::default(),
        }
    }

    /// Keeps exactly `edges`.
    pub fn keeping<'a>(shape: GraphShape, edges: impl IntoIterator<Item = &'a EdgeId>) -> Result<Self> {
        let mut mask = Self::none(shape);
        for e in edges {
            mask.set(e, true)?;
        }
        Ok(mask)
    }

    pub fn with_mode(mut self, mode: MaskMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn shape(&self) -> GraphShape {
        self.shape
    }

    pub fn set(&mut self, edge: &EdgeId, keep: bool) -> Result<()> {
        if !self.shape.contains(edge) {
            return Err(Error::InvalidEdge(format!("{edge} not in graph {:?}", self.shape)));
        }
        let idx = self.shape.edge_index(edge);
        self.keep[idx] = keep;
        Ok(())
    }

    pub fn is_kept(&self, edge: &EdgeId) -> bool {
        self.keep[self.shape.edge_index(edge)]
    }

    pub fn kept_count(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    #[inline]
    fn kept_at(&self, idx: usize) -> bool {
        self.keep[idx]
    }
}

/// Forward pass restricted to the edges kept by `mask`.
pub fn masked_forward(model: &Model, tokens: &TokenSequence, mask: &EdgeMask) -> Result<Vec<f64>> {
    let cfg = &model.config;
    let shape = GraphShape::new(cfg.n_layers, cfg.n_heads, tokens.len());
    if mask.shape() != shape {
        return Err(Error::InvalidEdge(format!(
            "mask shape {:?} does not match {:?}",
            mask.shape(),
            shape
        )));
    }
    let (d, nh, n) = (cfg.d_model, cfg.n_heads, tokens.len());
    let mut h = model.embed(tokens)?;
    let mut z = vec![0.0; n * d];
    let mut m = vec![0.0; d];
    let mut w = vec![0.0; n];
    for l in 0..cfg.n_layers {
        let layer = l + 1;
        let att = model.layer_attention(l, &h);
        for i in 0..n {
            let token = i + 1;
            let zi = &mut z[i * d..(i + 1) * d];
            if mask.kept_at(shape.edge_index(&EdgeId::ResidAttn { layer, token })) {
                zi.copy_from_slice(&h[i * d..(i + 1) * d]);
            } else {
                zi.iter_mut().for_each(|v| *v = 0.0);
            }
            for head in 0..nh {
                let kept = |j: usize| {
                    mask.kept_at(shape.edge_index(&EdgeId::Attn {
                        layer,
                        head: head + 1,
                        target: token,
                        source: j + 1,
                    }))
                };
                model.attn_logits(&att, head, i, &mut w);
                let weights = &mut w[..=i];
                match mask.mode {
                    MaskMode::AfterSoftmax => {
                        softmax_in_place(weights);
                        for (j, wj) in weights.iter_mut().enumerate() {
                            if !kept(j) {
                                *wj = 0.0;
                            }
                        }
                    }
                    MaskMode::BeforeSoftmax => {
                        let mut any = false;
                        for (j, wj) in weights.iter_mut().enumerate() {
                            if kept(j) {
                                any = true;
                            } else {
                                *wj = f64::NEG_INFINITY;
                            }
                        }
                        if !any {
                            continue;
                        }
                        softmax_in_place(weights);
                    }
                }
                for (j, &wj) in weights.iter().enumerate() {
                    if wj == 0.0 {
                        continue;
                    }
                    let o = &att.head_out[(head * n + j) * d..(head * n + j + 1) * d];
                    for (zz, &oo) in zi.iter_mut().zip(o) {
                        *zz += wj * oo;
                    }
                }
            }
        }
        for i in 0..n {
            let token = i + 1;
            let zi = &z[i * d..(i + 1) * d];
            let keep_res = mask.kept_at(shape.edge_index(&EdgeId::ResidMlp { layer, token }));
            let keep_mlp = mask.kept_at(shape.edge_index(&EdgeId::Mlp { layer, token }));
            if keep_mlp {
                model.mlp(l, zi, &mut m);
            } else {
                m.iter_mut().for_each(|v| *v = 0.0);
            }
            for ((hh, &zz), &mm) in h[i * d..(i + 1) * d].iter_mut().zip(zi).zip(&m) {
                *hh = if keep_res { zz + mm } else { mm };
            }
        }
    }
    model.logits_from_state(&h[(n - 1) * d..n * d])
}

/// [`masked_forward`] with attention masking applied before the softmax.
pub fn masked_forward_presoftmax(model: &Model, tokens: &TokenSequence, mask: &EdgeMask) -> Result<Vec<f64>> {
    masked_forward(model, tokens, &mask.clone().with_mode(MaskMode::BeforeSoftmax))
}

/// Mask that keeps only the trace's edges.
pub fn trace_mask(model: &Model, tokens: &TokenSequence, trace: &Trace, mode: MaskMode) -> Result<EdgeMask> {
    let shape = GraphShape::new(model.config.n_layers, model.config.n_heads, tokens.len());
    Ok(EdgeMask::keeping(shape, &trace.edges)?.with_mode(mode))
}

/// Mask for necessity testing: drops the trace's attention and MLP edges,
/// keeps everything else including every residual edge.
pub fn inverse_mask(model: &Model, tokens: &TokenSequence, trace: &Trace, mode: MaskMode) -> Result<EdgeMask> {
    let shape = GraphShape::new(model.config.n_layers, model.config.n_heads, tokens.len());
    let mut mask = EdgeMask::all(shape).with_mode(mode);
    for e in trace.edges.iter().filter(|e| !e.is_residual()) {
        mask.set(e, false)?;
    }
    Ok(mask)
}

pub fn inverse_ablation(model: &Model, tokens: &TokenSequence, trace: &Trace) -> Result<Vec<f64>> {
    masked_forward(
        model,
        tokens,
        &inverse_mask(model, tokens, trace, MaskMode::AfterSoftmax)?,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_graph, importance, CompGraph};
    use crate::metrics::total_variation;
    use crate::model::tests::small_config;
    use crate::numerics::SeededRng;
    use crate::trace::extract_trace;

    fn seq(ts: &[u32]) -> TokenSequence {
        TokenSequence::new(ts.to_vec()).unwrap()
    }

    fn shape_of(m: &Model, t: &TokenSequence) -> GraphShape {
        GraphShape::new(m.config.n_layers, m.config.n_heads, t.len())
    }

    fn residual_chain(shape: GraphShape, token: usize) -> Vec<EdgeId> {
        (1..=shape.n_layers)
            .flat_map(|layer| [EdgeId::ResidAttn { layer, token }, EdgeId::ResidMlp { layer, token }])
            .collect()
    }

    #[test]
    fn identity_mask_matches_full_model() {
        let m = Model::random(small_config(3, 16, 2), 4).unwrap();
        let t = seq(&[1, 7, 33, 200, 4]);
        let full = m.forward_plain(&t).unwrap();
        for mode in [MaskMode::AfterSoftmax, MaskMode::BeforeSoftmax] {
            let p = masked_forward(&m, &t, &EdgeMask::all(shape_of(&m, &t)).with_mode(mode)).unwrap();
            assert!(total_variation(&full, &p).unwrap() < 1e-8);
        }
    }

    #[test]
    fn empty_mask_is_uniform() {
        let m = Model::random(small_config(2, 16, 2), 4).unwrap();
        let t = seq(&[1, 2, 3]);
        let p = masked_forward(&m, &t, &EdgeMask::none(shape_of(&m, &t))).unwrap();
        let u = vec![1.0 / 257.0; 257];
        assert!(total_variation(&p, &u).unwrap() < 1e-9);
    }

    #[test]
    fn residual_chain_only_equals_embedding_readout() {
        let m = Model::random(small_config(3, 16, 2), 8).unwrap();
        let t = seq(&[10, 20, 30, 40]);
        let shape = shape_of(&m, &t);
        let mask = EdgeMask::keeping(shape, &residual_chain(shape, 4)).unwrap();
        let p = masked_forward(&m, &t, &mask).unwrap();
        let rec = m.forward_decomposed(&t).unwrap();
        let want = m.logits_from_state(rec.h(0, 4)).unwrap();
        assert!(total_variation(&p, &want).unwrap() < 1e-12);
    }

    #[test]
    fn single_token_self_edge() {
        let m = Model::random(small_config(1, 8, 1), 3).unwrap();
        let t = seq(&[42]);
        let shape = shape_of(&m, &t);
        let mut mask = EdgeMask::all(shape);
        mask.set(
            &EdgeId::Attn {
                layer: 1,
                head: 1,
                target: 1,
                source: 1,
            },
            false,
        )
        .unwrap();
        // dropping the only attention edge leaves residual + MLP
        let after = masked_forward(&m, &t, &mask).unwrap();
        let before = masked_forward_presoftmax(&m, &t, &mask).unwrap();
        assert!(total_variation(&after, &before).unwrap() < 1e-15);

        let rec = m.forward_decomposed(&t).unwrap();
        let h0 = rec.h(0, 1).to_vec();
        let mut mlp = vec![0.0; 8];
        m.mlp(0, &h0, &mut mlp);
        let state: Vec<f64> = h0.iter().zip(&mlp).map(|(a, b)| a + b).collect();
        let want = m.logits_from_state(&state).unwrap();
        assert!(total_variation(&after, &want).unwrap() < 1e-12);
    }

    #[test]
    fn modes_differ_on_random_half_mask() {
        let m = Model::random(small_config(2, 16, 2), 12).unwrap();
        let t = seq(&[5, 6, 7, 8, 9, 10]);
        let shape = shape_of(&m, &t);
        let mut rng = SeededRng::new(99);
        let mut mask = EdgeMask::all(shape);
        for idx in 0..shape.edge_count() {
            if rng.next_f64() < 0.5 {
                mask.set(&shape.edge_at(idx), false).unwrap();
            }
        }
        // keep the last token reachable so the output is not trivially uniform
        for e in residual_chain(shape, shape.n_tokens) {
            mask.set(&e, true).unwrap();
        }
        let a = masked_forward(&m, &t, &mask).unwrap();
        let b = masked_forward_presoftmax(&m, &t, &mask).unwrap();
        for p in [&a, &b] {
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(p.iter().all(|&v| v >= 0.0));
        }
        let d = total_variation(&a, &b).unwrap();
        assert!(d > 0.0 && d <= 1.0);
    }

    #[test]
    fn inverse_ablation_endpoints() {
        let m = Model::random(small_config(2, 16, 2), 5).unwrap();
        let t = seq(&[11, 12, 13]);
        let rec = m.forward_decomposed(&t).unwrap();
        let g = build_graph(&rec).unwrap();

        let empty = extract_trace(&g, &importance(&rec, &g), 0);
        let p = inverse_ablation(&m, &t, &empty).unwrap();
        assert!(total_variation(&p, &rec.probs).unwrap() < 1e-8);

        let all = Trace {
            edges: g.edges().iter().copied().filter(|e| !e.is_residual()).collect(),
            ..empty
        };
        let p = inverse_ablation(&m, &t, &all).unwrap();
        let want = m.logits_from_state(rec.h(0, 3)).unwrap();
        assert!(total_variation(&p, &want).unwrap() < 1e-12);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let m = Model::random(small_config(2, 16, 2), 5).unwrap();
        let t = seq(&[1, 2]);
        let wrong = EdgeMask::all(GraphShape::new(2, 2, 3));
        assert!(masked_forward(&m, &t, &wrong).is_err());
        let g = CompGraph::from_shape(GraphShape::new(2, 2, 2));
        assert!(EdgeMask::all(g.shape())
            .set(&EdgeId::Mlp { layer: 3, token: 1 }, false)
            .is_err());
    }
}
