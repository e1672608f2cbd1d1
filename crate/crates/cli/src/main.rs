// SPDX-License-Identifier: MIT OR Apache-2.0

//! `strace-lab`: generate toy models, extract s-Traces over a corpus and
//! summarize the results.
//!
//! ```text
//! strace-lab gen-model --layers 4 --d-model 64 --heads 4 --seed 7 --out model.bin
//! strace-lab run --model model.bin --corpus corpus.txt --out-dir out/
//! strace-lab analyze density --in out/density.csv --out out/correlations.csv
//! strace-lab baseline random --seeds 10 --model model.bin --corpus corpus.txt --out-dir out/
//! strace-lab ablate inverse --model model.bin --corpus corpus.txt --out-dir out/
//! ```

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use strace_core::harness::{
    self, compare_models, correlate, freqcurve_from_dumps, nucleus_summary, read_density_csv, read_nucleus_csv,
    read_trace_dumps, structure_from_dumps, write_correlations_csv, write_freqcurve_csv, write_nucleus_summary_csv,
    write_structure_csv, EvalOptions, ExperimentConfig, ModelSource,
};
use strace_core::{Activation, MaskMode, Model, ModelConfig, SizeGrid};

#[derive(Parser)]
#[command(name = "strace-lab", version, about = "Token-level s-Trace extraction and analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded random model to a weight file.
    GenModel(GenModel),
    /// Extract greedy traces for every corpus instance and write the metric CSVs.
    Run(RunArgs),
    /// Summarize outputs of a previous run.
    Analyze {
        #[arg(value_enum)]
        what: Analysis,
        /// Input file (`traces.jsonl` for structure/frequency, a CSV otherwise).
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Layer bins for `structure`.
        #[arg(long, default_value_t = 4)]
        bins: usize,
    },
    /// Random residual/MLP-first baseline.
    Baseline {
        #[arg(value_enum)]
        kind: BaselineKind,
        #[arg(long, default_value_t = 10)]
        seeds: usize,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Necessity check: drop the trace, keep the rest.
    Ablate {
        #[arg(value_enum)]
        kind: AblationKind,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Spearman correlation of density between two runs' `density.csv`.
    Compare { a: PathBuf, b: PathBuf },
}

#[derive(Args)]
struct GenModel {
    #[arg(long, default_value_t = 64)]
    d_model: usize,
    #[arg(long, default_value_t = 4)]
    layers: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    /// Defaults to d_model / heads.
    #[arg(long)]
    d_head: Option<usize>,
    /// Defaults to 4 * d_model.
    #[arg(long)]
    d_ff: Option<usize>,
    #[arg(long, default_value_t = strace_core::harness::BYTE_VOCAB)]
    vocab: usize,
    #[arg(long, default_value_t = 64)]
    max_seq: usize,
    #[arg(long, default_value_t = 1e-6)]
    norm_eps: f64,
    #[arg(long, value_enum, default_value_t = Act::Gelu)]
    activation: Act,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// `default` or a comma-separated list of relative sizes.
    #[arg(long, default_value = "default")]
    grid: String,
    #[arg(long, value_enum, default_value_t = Mode::After)]
    mode: Mode,
    /// Worker threads; STRACE_LAB_THREADS takes precedence when set.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long, default_value_t = 5)]
    min_words: usize,
    #[arg(long, default_value_t = 80)]
    max_words: usize,
    #[arg(long, default_value_t = 4)]
    layer_bins: usize,
    /// Also write every grid trace to traces.jsonl.
    #[arg(long)]
    dump_traces: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Act {
    Gelu,
    Silu,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    After,
    Before,
}

#[derive(Clone, Copy, ValueEnum)]
enum Analysis {
    Structure,
    Frequency,
    Density,
    Nucleus,
}

#[derive(Clone, Copy, ValueEnum)]
enum BaselineKind {
    Random,
}

#[derive(Clone, Copy, ValueEnum)]
enum AblationKind {
    Inverse,
}

fn parse_grid(arg: &str) -> Result<SizeGrid> {
    if arg.trim() == "default" {
        return Ok(SizeGrid::default());
    }
    let values = arg
        .split(',')
        .map(|v| v.trim().parse::<f64>().with_context(|| format!("bad grid value {v:?}")))
        .collect::<Result<Vec<_>>>()?;
    Ok(SizeGrid::new(values)?)
}

impl RunArgs {
    fn experiment(&self) -> Result<ExperimentConfig> {
        if self.min_words > self.max_words {
            bail!("--min-words exceeds --max-words");
        }
        let mut cfg = ExperimentConfig::new(ModelSource::File(self.model.clone()), &self.corpus, &self.out_dir);
        cfg.eval = EvalOptions {
            grid: parse_grid(&self.grid)?,
            mode: match self.mode {
                Mode::After => MaskMode::AfterSoftmax,
                Mode::Before => MaskMode::BeforeSoftmax,
            },
            layer_bins: self.layer_bins,
            dump_traces: self.dump_traces,
            ..EvalOptions::default()
        };
        cfg.min_words = self.min_words;
        cfg.max_words = self.max_words;
        cfg.limit = self.limit;
        cfg.jobs = self.jobs;
        cfg.seed = self.seed;
        Ok(cfg)
    }
}

fn gen_model(a: &GenModel) -> Result<()> {
    let config = ModelConfig {
        n_layers: a.layers,
        d_model: a.d_model,
        n_heads: a.heads,
        d_head: a.d_head.unwrap_or((a.d_model / a.heads.max(1)).max(1)),
        d_ff: a.d_ff.unwrap_or(4 * a.d_model),
        vocab_size: a.vocab,
        max_seq: a.max_seq,
        norm_eps: a.norm_eps,
        activation: match a.activation {
            Act::Gelu => Activation::Gelu,
            Act::Silu => Activation::Silu,
        },
    };
    let model = Model::random(config, a.seed)?;
    model.save(&a.out)?;
    println!("{} sha256:{}", a.out.display(), model.content_hash());
    Ok(())
}

fn analyze(what: Analysis, input: &Path, out: &Path, bins: usize) -> Result<()> {
    match what {
        Analysis::Structure => {
            let rows = structure_from_dumps(&read_trace_dumps(input)?, bins)?;
            write_structure_csv(out, &rows)?;
        }
        Analysis::Frequency => {
            let curves = freqcurve_from_dumps(&read_trace_dumps(input)?)?;
            write_freqcurve_csv(out, &curves)?;
        }
        Analysis::Density => {
            let table = correlate(&read_density_csv(input)?)?;
            for c in &table.rows {
                match c.rho {
                    Some(rho) => println!("rho(density, {}) = {rho:.4} (n={})", c.against, table.n),
                    None => println!("rho(density, {}) undefined (n={})", c.against, table.n),
                }
            }
            write_correlations_csv(out, &table)?;
        }
        Analysis::Nucleus => {
            let summary = nucleus_summary(&read_nucleus_csv(input)?);
            write_nucleus_summary_csv(out, &summary)?;
        }
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenModel(a) => gen_model(&a),
        Command::Run(r) => {
            let summary = harness::run_experiment(&r.experiment()?)?;
            println!(
                "{} instances: {} ok, {} skipped",
                summary.total, summary.ok, summary.skipped
            );
            for f in summary.files {
                println!("wrote {}", f.display());
            }
            Ok(())
        }
        Command::Analyze { what, input, out, bins } => analyze(what, &input, &out, bins),
        Command::Baseline {
            kind: BaselineKind::Random,
            seeds,
            run,
        } => {
            if seeds == 0 {
                bail!("--seeds must be at least 1");
            }
            let path = harness::run_random_baseline(&run.experiment()?, seeds)?;
            println!("wrote {}", path.display());
            Ok(())
        }
        Command::Ablate {
            kind: AblationKind::Inverse,
            run,
        } => {
            let path = harness::run_inverse_ablation(&run.experiment()?)?;
            println!("wrote {}", path.display());
            Ok(())
        }
        Command::Compare { a, b } => {
            let (rho, n) = compare_models(&read_density_csv(&a)?, &read_density_csv(&b)?)?;
            match rho {
                Some(rho) => println!("rho = {rho:.4} (n={n})"),
                None => println!("rho undefined (n={n})"),
            }
            Ok(())
        }
    }
}
