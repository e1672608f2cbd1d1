// SPDX-License-Identifier: MIT OR Apache-2.0

//! Per-instance evaluation: decomposed forward, graph, importance, nested
//! grid traces, masked re-inference and metrics.

use std::collections::HashMap;

use crate::ablation::{inverse_mask, masked_forward, trace_mask, EdgeMask, MaskMode};
use crate::analysis::{layer_composition, type_composition, TypeComposition};
use crate::error::{Error, Result};
use crate::graph::{build_graph, component_of, importance, CompGraph, ComponentId, GraphShape};
use crate::metrics::{
    lm_loss, nucleus_reconstruction_size, shannon_entropy, total_variation, DensityProfile, TokenFrequency,
};
use crate::model::{Model, TokenSequence};
use crate::numerics::SeededRng;
use crate::trace::{random_scores, traces_for_budgets, SizeGrid, Trace, TraceDump};

/// Nucleus targets `{1, 5, 10, 20, ..., 90}` in percent.
pub const DEFAULT_NUCLEUS_K: [f64; 11] = [1.0, 5.0, 10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 70.0, 80.0, 90.0];

/// Knobs shared by every instance of a run.
#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub grid: SizeGrid,
    pub mode: MaskMode,
    pub nucleus_k: Vec<f64>,
    pub layer_bins: usize,
    pub dump_traces: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            grid: SizeGrid::default(),
            mode: MaskMode::AfterSoftmax,
            nucleus_k: DEFAULT_NUCLEUS_K.to_vec(),
            layer_bins: 4,
            dump_traces: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Status {
    Ok,
    Skipped(String),
}

/// Everything measured for one corpus instance. Grid-aligned vectors have
/// one entry per grid point; they are empty for skipped instances.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceResult {
    pub instance_id: usize,
    pub status: Status,
    pub n_tokens: usize,
    pub budgets: Vec<usize>,
    pub tv: Vec<f64>,
    /// Error of the empty trace (size 0).
    pub tv_empty: f64,
    /// `(k_percent, minimal grid size)`; `None` when not reached.
    pub nucleus: Vec<(f64, Option<f64>)>,
    pub density: f64,
    pub log_density: f64,
    pub entropy: f64,
    pub loss: f64,
    pub top1_token: usize,
    pub top1_freq: f64,
    pub layer_bins: Vec<Vec<f64>>,
    pub types: Vec<TypeComposition>,
    /// Edge count per component for each grid trace, in
    /// [`component_universe`] order.
    pub component_counts: Vec<Vec<usize>>,
    pub dumps: Vec<TraceDump>,
}

impl InstanceResult {
    pub fn skipped(instance_id: usize, n_tokens: usize, reason: String) -> Self {
        Self {
            instance_id,
            status: Status::Skipped(reason),
            n_tokens,
            budgets: Vec::new(),
            tv: Vec::new(),
            tv_empty: f64::NAN,
            nucleus: Vec::new(),
            density: f64::NAN,
            log_density: f64::NAN,
            entropy: f64::NAN,
            loss: f64::NAN,
            top1_token: 0,
            top1_freq: f64::NAN,
            layer_bins: Vec::new(),
            types: Vec::new(),
            component_counts: Vec::new(),
            dumps: Vec::new(),
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == Status::Ok
    }
}

/// All components of a model shape in ascending id order.
pub fn component_universe(n_layers: usize, n_heads: usize) -> Vec<ComponentId> {
    let mut out = Vec::with_capacity(n_layers * (n_heads + 3));
    for layer in 1..=n_layers {
        for head in 1..=n_heads {
            out.push(ComponentId::Attn { layer, head });
        }
        out.push(ComponentId::Mlp { layer });
        out.push(ComponentId::ResidAttn { layer });
        out.push(ComponentId::ResidMlp { layer });
    }
    out.sort();
    out
}

/// Splits a corpus sequence into model input and the gold next token.
pub fn split_gold(seq: &TokenSequence) -> Result<(TokenSequence, usize)> {
    let s = seq.as_slice();
    if s.len() < 2 {
        return Err(Error::EmptyInput("instance needs at least two tokens"));
    }
    Ok((TokenSequence::new(s[..s.len() - 1].to_vec())?, s[s.len() - 1] as usize))
}

fn ensure_finite(what: &str, xs: &[f64]) -> Result<()> {
    if xs.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

/// The graph, importance scores and full output for one input.
pub struct PreparedInstance {
    pub tokens: TokenSequence,
    pub graph: CompGraph,
    pub scores: Vec<f64>,
    pub full: Vec<f64>,
}

pub fn prepare(model: &Model, tokens: TokenSequence, corrupt: bool) -> Result<PreparedInstance> {
    let record = model.forward_decomposed(&tokens)?;
    let mut full = record.probs.clone();
    if corrupt {
        full[0] = f64::NAN;
    }
    ensure_finite("output distribution", &full)?;
    let graph = build_graph(&record)?;
    let scores = importance(&record, &graph).values().to_vec();
    ensure_finite("importance scores", &scores)?;
    Ok(PreparedInstance {
        tokens,
        graph,
        scores,
        full,
    })
}

impl PreparedInstance {
    pub fn shape(&self) -> GraphShape {
        self.graph.shape()
    }

    /// Nested traces at every grid budget from one search over `scores`.
    pub fn grid_traces(&self, scores: &[f64], grid: &SizeGrid) -> Vec<Trace> {
        traces_for_budgets(&self.graph, scores, &grid.budgets(self.graph.edge_count()))
    }

    /// TV between the full output and each masked output; masks with equal
    /// budgets are evaluated once.
    pub fn masked_errors(&self, model: &Model, masks: impl IntoIterator<Item = (usize, EdgeMask)>) -> Result<Vec<f64>> {
        let mut cache: HashMap<usize, f64> = HashMap::new();
        let mut out = Vec::new();
        for (budget, mask) in masks {
            let tv = match cache.get(&budget) {
                Some(&tv) => tv,
                None => {
                    let p = masked_forward(model, &self.tokens, &mask)?;
                    ensure_finite("masked output", &p)?;
                    let tv = total_variation(&self.full, &p)?;
                    cache.insert(budget, tv);
                    tv
                }
            };
            out.push(tv);
        }
        Ok(out)
    }

    fn masked_distribution(&self, model: &Model, mask: &EdgeMask) -> Result<Vec<f64>> {
        let p = masked_forward(model, &self.tokens, mask)?;
        ensure_finite("masked output", &p)?;
        Ok(p)
    }
}

/// Full greedy-trace evaluation of one instance.
pub fn evaluate_instance(
    model: &Model,
    instance_id: usize,
    seq: &TokenSequence,
    freq: &TokenFrequency,
    opts: &EvalOptions,
    model_hash: &str,
    corrupt: bool,
) -> InstanceResult {
    match try_evaluate(model, instance_id, seq, freq, opts, model_hash, corrupt) {
        Ok(r) => r,
        Err(e) => InstanceResult::skipped(instance_id, seq.len().saturating_sub(1), e.to_string()),
    }
}

fn try_evaluate(
    model: &Model,
    instance_id: usize,
    seq: &TokenSequence,
    freq: &TokenFrequency,
    opts: &EvalOptions,
    model_hash: &str,
    corrupt: bool,
) -> Result<InstanceResult> {
    let (tokens, gold) = split_gold(seq)?;
    let prep = prepare(model, tokens, corrupt)?;
    let shape = prep.shape();
    let traces = prep.grid_traces(&prep.scores, &opts.grid);

    let mut masks = Vec::with_capacity(traces.len());
    for t in &traces {
        masks.push((t.budget, trace_mask(model, &prep.tokens, t, opts.mode)?));
    }
    let mut kept_dists: HashMap<usize, Vec<f64>> = HashMap::new();
    let mut tv = Vec::with_capacity(traces.len());
    let mut grid_dists = Vec::with_capacity(traces.len());
    for ((budget, mask), &s) in masks.iter().zip(opts.grid.values()) {
        let p = match kept_dists.get(budget) {
            Some(p) => p.clone(),
            None => {
                let p = prep.masked_distribution(model, mask)?;
                kept_dists.insert(*budget, p.clone());
                p
            }
        };
        tv.push(total_variation(&prep.full, &p)?);
        grid_dists.push((s, p));
    }

    let empty = prep.masked_distribution(model, &EdgeMask::none(shape).with_mode(opts.mode))?;
    let tv_empty = total_variation(&prep.full, &empty)?;

    let nucleus = opts
        .nucleus_k
        .iter()
        .map(|&k| (k, nucleus_reconstruction_size(&prep.full, &grid_dists, k)))
        .collect();

    let profile = DensityProfile::from_measurements(opts.grid.values(), &tv, tv_empty)?;
    let top1_token = prep
        .full
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
        .map(|(i, _)| i)
        .unwrap_or(0);

    let universe = component_universe(shape.n_layers, shape.n_heads);
    let position: HashMap<ComponentId, usize> = universe.iter().enumerate().map(|(i, c)| (*c, i)).collect();
    let mut layer_bins = Vec::with_capacity(traces.len());
    let mut types = Vec::with_capacity(traces.len());
    let mut component_counts = Vec::with_capacity(traces.len());
    let mut dumps = Vec::new();
    for (t, &s) in traces.iter().zip(opts.grid.values()) {
        layer_bins.push(layer_composition(&t.edges, shape.n_layers, opts.layer_bins)?);
        types.push(type_composition(&t.edges)?);
        let mut counts = vec![0usize; universe.len()];
        for e in &t.edges {
            counts[position[&component_of(e)]] += 1;
        }
        component_counts.push(counts);
        if opts.dump_traces {
            let mut d = TraceDump::new(model_hash, shape.n_tokens, t);
            d.instance_id = Some(instance_id);
            d.grid_s_rel = Some(s);
            d.layers = Some(shape.n_layers);
            d.heads = Some(shape.n_heads);
            dumps.push(d);
        }
    }

    Ok(InstanceResult {
        instance_id,
        status: Status::Ok,
        n_tokens: shape.n_tokens,
        budgets: traces.iter().map(|t| t.budget).collect(),
        tv,
        tv_empty,
        nucleus,
        density: profile.density(),
        log_density: profile.log_density(),
        entropy: shannon_entropy(&prep.full)?,
        loss: lm_loss(&prep.full, gold),
        top1_token,
        top1_freq: freq.get(top1_token as u32),
        layer_bins,
        types,
        component_counts,
        dumps,
    })
}

/// TV of random-baseline traces: one row per baseline seed, one column per
/// grid point. Baseline seed `s` of instance `i` is the `s`-th draw of
/// stream `i` under `base_seed`.
pub fn random_baseline_errors(
    model: &Model,
    instance_id: usize,
    seq: &TokenSequence,
    opts: &EvalOptions,
    n_seeds: usize,
    base_seed: u64,
) -> Result<Vec<(u64, Vec<f64>)>> {
    let (tokens, _) = split_gold(seq)?;
    let prep = prepare(model, tokens, false)?;
    let mut seeds = SeededRng::with_stream(base_seed, instance_id as u64);
    let mut out = Vec::with_capacity(n_seeds);
    for _ in 0..n_seeds {
        let seed = rand::RngCore::next_u64(&mut seeds);
        let scores = random_scores(&prep.graph, seed);
        let traces = prep.grid_traces(scores.values(), &opts.grid);
        let masks = traces
            .iter()
            .map(|t| Ok((t.budget, trace_mask(model, &prep.tokens, t, opts.mode)?)))
            .collect::<Result<Vec<_>>>()?;
        out.push((seed, prep.masked_errors(model, masks)?));
    }
    Ok(out)
}

/// Greedy-trace TV (`kept`) and inverse-ablation TV per grid point.
#[derive(Debug, Clone, PartialEq)]
pub struct InverseResult {
    pub budgets: Vec<usize>,
    pub kept: Vec<f64>,
    pub inverse: Vec<f64>,
}

pub fn inverse_errors(model: &Model, seq: &TokenSequence, opts: &EvalOptions) -> Result<InverseResult> {
    let (tokens, _) = split_gold(seq)?;
    let prep = prepare(model, tokens, false)?;
    let traces = prep.grid_traces(&prep.scores, &opts.grid);
    let mut kept_masks = Vec::with_capacity(traces.len());
    let mut inv_masks = Vec::with_capacity(traces.len());
    for t in &traces {
        kept_masks.push((t.budget, trace_mask(model, &prep.tokens, t, opts.mode)?));
        inv_masks.push((t.budget, inverse_mask(model, &prep.tokens, t, opts.mode)?));
    }
    Ok(InverseResult {
        budgets: traces.iter().map(|t| t.budget).collect(),
        kept: prep.masked_errors(model, kept_masks)?,
        inverse: prep.masked_errors(model, inv_masks)?,
    })
}
