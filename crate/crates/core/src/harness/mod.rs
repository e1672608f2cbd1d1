// SPDX-License-Identifier: MIT OR Apache-2.0

//! End-to-end experiment runner.
//!
//! Instances are the unit of parallelism. Each worker owns its forward
//! record, graph and traces; results are merged in instance-id order, so
//! every output file is identical at any worker count.

mod corpus;
mod instance;
mod report;
mod stats;

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde_json::json;

pub use corpus::{ingest_corpus, ingest_text, select_chunks, split_sentences, tokenize_bytes, BOS, BYTE_VOCAB};
pub use instance::{
    component_universe, evaluate_instance, inverse_errors, prepare, random_baseline_errors, split_gold, EvalOptions,
    InstanceResult, InverseResult, PreparedInstance, Status, DEFAULT_NUCLEUS_K,
};
pub use report::{
    freqcurve_from_dumps, nucleus_summary, read_density_csv, read_nucleus_csv, read_trace_dumps, structure_from_dumps,
    write_correlations_csv, write_freqcurve_csv, write_nucleus_summary_csv, write_structure_csv, DensityRow,
    NucleusRow, NucleusSummary, StructureRow, DENSITY_CSV, FREQCURVE_CSV, NUCLEUS_CSV, STRUCTURE_CSV, TV_CSV,
};
pub use stats::{compare_models, correlate, Correlation, CorrelationTable};

use crate::ablation::MaskMode;
use crate::error::{Error, Result};
use crate::metrics::{token_frequency, TokenFrequency};
use crate::model::{Model, ModelConfig, TokenSequence};

/// Environment variable that overrides the requested worker count.
pub const THREADS_ENV: &str = "STRACE_LAB_THREADS";

pub const BASELINE_CSV: &str = "baseline_random.csv";
pub const INVERSE_CSV: &str = "inverse_ablation.csv";
pub const MANIFEST_JSON: &str = "manifest.json";
pub const TRACES_JSONL: &str = "traces.jsonl";

#[derive(Debug, Clone)]
pub enum ModelSource {
    File(PathBuf),
    Random { config: ModelConfig, seed: u64 },
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub model: ModelSource,
    pub corpus: PathBuf,
    pub out_dir: PathBuf,
    pub eval: EvalOptions,
    pub min_words: usize,
    pub max_words: usize,
    pub limit: Option<usize>,
    pub jobs: usize,
    pub seed: u64,
    /// Instance ids whose output is overwritten with NaN (fault-path testing).
    #[doc(hidden)]
    pub fault_instances: Vec<usize>,
}

impl ExperimentConfig {
    pub fn new(model: ModelSource, corpus: impl Into<PathBuf>, out_dir: impl Into<PathBuf>) -> Self {
        Self {
            model,
            corpus: corpus.into(),
            out_dir: out_dir.into(),
            eval: EvalOptions::default(),
            min_words: 5,
            max_words: 80,
            limit: None,
            jobs: 1,
            seed: 0,
            fault_instances: Vec::new(),
        }
    }
}

/// Counts and files of a finished run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub total: usize,
    pub ok: usize,
    pub skipped: usize,
    pub files: Vec<PathBuf>,
}

/// `STRACE_LAB_THREADS` when set and valid, else `requested`; at least 1.
pub fn resolve_jobs(requested: usize) -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .unwrap_or(requested)
        .max(1)
}

/// Maps `f` over `items` on a pool of `jobs` workers, preserving order.
pub fn par_map<T, R, F>(jobs: usize, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync + Send,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .expect("thread pool");
    pool.install(|| items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect())
}

/// Model, ingested instances and corpus token frequencies for a config.
pub struct Inputs {
    pub model: Model,
    pub model_hash: String,
    pub sequences: Vec<TokenSequence>,
    pub frequency: TokenFrequency,
}

pub fn load_inputs(cfg: &ExperimentConfig) -> Result<Inputs> {
    let model = match &cfg.model {
        ModelSource::File(p) => Model::load(p)?,
        ModelSource::Random { config, seed } => Model::random(config.clone(), *seed)?,
    };
    if model.config.vocab_size < BYTE_VOCAB {
        return Err(Error::InvalidConfig(format!(
            "byte-level corpus needs vocab_size >= {BYTE_VOCAB}, model has {}",
            model.config.vocab_size
        )));
    }
    // one extra token: the last one is the gold continuation
    let mut sequences = ingest_corpus(&cfg.corpus, cfg.min_words, cfg.max_words, model.config.max_seq + 1)?;
    if let Some(limit) = cfg.limit {
        sequences.truncate(limit);
    }
    let frequency = token_frequency(
        sequences
            .iter()
            .flat_map(|s| s.as_slice().iter())
            .filter(|&&t| t != BOS),
    )?;
    let model_hash = model.content_hash();
    Ok(Inputs {
        model,
        model_hash,
        sequences,
        frequency,
    })
}

/// Evaluates every instance in parallel.
pub fn evaluate_all(inputs: &Inputs, cfg: &ExperimentConfig) -> Vec<InstanceResult> {
    par_map(resolve_jobs(cfg.jobs), &inputs.sequences, |id, seq| {
        evaluate_instance(
            &inputs.model,
            id,
            seq,
            &inputs.frequency,
            &cfg.eval,
            &inputs.model_hash,
            cfg.fault_instances.contains(&id),
        )
    })
}

fn create_out_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn mode_name(mode: MaskMode) -> &'static str {
    match mode {
        MaskMode::AfterSoftmax => "after",
        MaskMode::BeforeSoftmax => "before",
    }
}

/// Runs the greedy pipeline and writes every per-metric CSV plus a manifest.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunSummary> {
    let inputs = load_inputs(cfg)?;
    let results = evaluate_all(&inputs, cfg);
    create_out_dir(&cfg.out_dir)?;
    let shape_layers = inputs.model.config.n_layers;
    let shape_heads = inputs.model.config.n_heads;

    let mut files = vec![
        report::write_tv_csv(&cfg.out_dir, &cfg.eval.grid, &results)?,
        report::write_nucleus_csv(&cfg.out_dir, &results)?,
        report::write_density_csv(&cfg.out_dir, &results)?,
    ];
    let structure = report::structure_from_results(&cfg.eval.grid, cfg.eval.layer_bins, &results);
    files.push(write_structure_csv(&cfg.out_dir.join(STRUCTURE_CSV), &structure)?);
    let curves = report::freqcurves_from_results(&cfg.eval.grid, shape_layers, shape_heads, &results)?;
    files.push(write_freqcurve_csv(&cfg.out_dir.join(FREQCURVE_CSV), &curves)?);
    if cfg.eval.dump_traces {
        files.push(report::write_trace_dumps(&cfg.out_dir.join(TRACES_JSONL), &results)?);
    }

    let ok = results.iter().filter(|r| r.is_ok()).count();
    let skipped: Vec<_> = results
        .iter()
        .filter_map(|r| match &r.status {
            Status::Skipped(reason) => Some(json!({"instance_id": r.instance_id, "reason": reason})),
            Status::Ok => None,
        })
        .collect();
    let manifest = json!({
        "tool": "strace-lab",
        "version": env!("CARGO_PKG_VERSION"),
        "model_hash": inputs.model_hash,
        "model_config": inputs.model.config,
        "model_source": match &cfg.model {
            ModelSource::File(p) => json!({"file": p}),
            ModelSource::Random { seed, .. } => json!({"random_seed": seed}),
        },
        "corpus": cfg.corpus,
        "min_words": cfg.min_words,
        "max_words": cfg.max_words,
        "limit": cfg.limit,
        "grid": cfg.eval.grid.values(),
        "mode": mode_name(cfg.eval.mode),
        "nucleus_k": cfg.eval.nucleus_k,
        "layer_bins": cfg.eval.layer_bins,
        "seed": cfg.seed,
        "jobs": resolve_jobs(cfg.jobs),
        "instances_total": results.len(),
        "instances_ok": ok,
        "instances_skipped": results.len() - ok,
        "skipped": skipped,
    });
    let manifest_path = cfg.out_dir.join(MANIFEST_JSON);
    std::fs::write(&manifest_path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&manifest_path, e))?;
    files.push(manifest_path);

    Ok(RunSummary {
        total: results.len(),
        ok,
        skipped: results.len() - ok,
        files,
    })
}

/// Random residual/MLP-first baseline over `n_seeds` seeds per instance.
/// Writes `baseline_random.csv` (`instance_id,seed,s_rel,budget_edges,tv`).
pub fn run_random_baseline(cfg: &ExperimentConfig, n_seeds: usize) -> Result<PathBuf> {
    let inputs = load_inputs(cfg)?;
    let grid = &cfg.eval.grid;
    let rows = par_map(resolve_jobs(cfg.jobs), &inputs.sequences, |id, seq| {
        random_baseline_errors(&inputs.model, id, seq, &cfg.eval, n_seeds, cfg.seed).map(|r| {
            let (tokens, _) = split_gold(seq).expect("validated by baseline run");
            let edges =
                crate::graph::GraphShape::new(inputs.model.config.n_layers, inputs.model.config.n_heads, tokens.len())
                    .edge_count();
            (r, grid.budgets(edges))
        })
    });
    create_out_dir(&cfg.out_dir)?;
    let path = cfg.out_dir.join(BASELINE_CSV);
    let mut w = report::csv_writer(&path)?;
    w.write_record(["instance_id", "seed", "s_rel", "budget_edges", "tv"])?;
    for (id, row) in rows.into_iter().enumerate() {
        let Ok((per_seed, budgets)) = row else { continue };
        for (seed, tvs) in per_seed {
            for ((s, b), tv) in grid.values().iter().zip(&budgets).zip(&tvs) {
                w.write_record([
                    id.to_string(),
                    seed.to_string(),
                    s.to_string(),
                    b.to_string(),
                    tv.to_string(),
                ])?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Necessity check: writes `inverse_ablation.csv`
/// (`instance_id,s_rel,budget_edges,tv_kept,tv_inverse`).
pub fn run_inverse_ablation(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let inputs = load_inputs(cfg)?;
    let rows = par_map(resolve_jobs(cfg.jobs), &inputs.sequences, |_, seq| {
        inverse_errors(&inputs.model, seq, &cfg.eval)
    });
    create_out_dir(&cfg.out_dir)?;
    let path = cfg.out_dir.join(INVERSE_CSV);
    let mut w = report::csv_writer(&path)?;
    w.write_record(["instance_id", "s_rel", "budget_edges", "tv_kept", "tv_inverse"])?;
    for (id, row) in rows.into_iter().enumerate() {
        let Ok(r) = row else { continue };
        for (i, s) in cfg.eval.grid.values().iter().enumerate() {
            w.write_record([
                id.to_string(),
                s.to_string(),
                r.budgets[i].to_string(),
                r.kept[i].to_string(),
                r.inverse[i].to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
