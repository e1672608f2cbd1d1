// SPDX-License-Identifier: MIT OR Apache-2.0

//! CSV and JSON-lines emission, plus the readers used by `analyze`.
//!
//! Schemas (header row always written):
//!
//! | file              | columns                                                             |
//! |-------------------|---------------------------------------------------------------------|
//! | `tv_vs_size.csv`  | `instance_id,s_rel,budget_edges,tv`                                 |
//! | `nucleus.csv`     | `instance_id,k_percent,s_min_rel` (empty when not reached)          |
//! | `density.csv`     | `instance_id,density,entropy,loss,top1_token,top1_freq,status`      |
//! | `structure.csv`   | `s_rel,category,fraction`                                           |
//! | `freqcurve.csv`   | `s_rel,x_fraction,y_cumulative`                                     |

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Deserialize;

use super::instance::{component_universe, InstanceResult, Status};
use crate::analysis::{component_frequency_curve, layer_composition, type_composition, FrequencyCurve};
use crate::error::{Error, Result};
use crate::graph::EdgeId;
use crate::trace::{SizeGrid, TraceDump};

pub const TV_CSV: &str = "tv_vs_size.csv";
pub const NUCLEUS_CSV: &str = "nucleus.csv";
pub const DENSITY_CSV: &str = "density.csv";
pub const STRUCTURE_CSV: &str = "structure.csv";
pub const FREQCURVE_CSV: &str = "freqcurve.csv";

pub(crate) fn csv_writer(path: &Path) -> Result<csv::Writer<File>> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(f))
}

fn csv_reader(path: &Path) -> Result<csv::Reader<File>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Reader::from_reader(f))
}

fn finish(mut w: csv::Writer<File>, path: &Path) -> Result<PathBuf> {
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(path.to_path_buf())
}

fn ok_results(results: &[InstanceResult]) -> impl Iterator<Item = &InstanceResult> {
    results.iter().filter(|r| r.is_ok())
}

pub(crate) fn write_tv_csv(dir: &Path, grid: &SizeGrid, results: &[InstanceResult]) -> Result<PathBuf> {
    let path = dir.join(TV_CSV);
    let mut w = csv_writer(&path)?;
    w.write_record(["instance_id", "s_rel", "budget_edges", "tv"])?;
    for r in ok_results(results) {
        for ((s, b), tv) in grid.values().iter().zip(&r.budgets).zip(&r.tv) {
            w.write_record([r.instance_id.to_string(), s.to_string(), b.to_string(), tv.to_string()])?;
        }
    }
    finish(w, &path)
}

pub(crate) fn write_nucleus_csv(dir: &Path, results: &[InstanceResult]) -> Result<PathBuf> {
    let path = dir.join(NUCLEUS_CSV);
    let mut w = csv_writer(&path)?;
    w.write_record(["instance_id", "k_percent", "s_min_rel"])?;
    for r in ok_results(results) {
        for (k, s) in &r.nucleus {
            let s = s.map(|v| v.to_string()).unwrap_or_default();
            w.write_record([r.instance_id.to_string(), k.to_string(), s])?;
        }
    }
    finish(w, &path)
}

pub(crate) fn write_density_csv(dir: &Path, results: &[InstanceResult]) -> Result<PathBuf> {
    let path = dir.join(DENSITY_CSV);
    let mut w = csv_writer(&path)?;
    w.write_record([
        "instance_id",
        "density",
        "entropy",
        "loss",
        "top1_token",
        "top1_freq",
        "status",
    ])?;
    for r in results {
        match r.status {
            Status::Ok => w.write_record([
                r.instance_id.to_string(),
                r.density.to_string(),
                r.entropy.to_string(),
                r.loss.to_string(),
                r.top1_token.to_string(),
                r.top1_freq.to_string(),
                "ok".to_string(),
            ])?,
            Status::Skipped(_) => w.write_record([
                r.instance_id.to_string(),
                "".into(),
                "".into(),
                "".into(),
                "".into(),
                "".into(),
                "skipped".into(),
            ])?,
        }
    }
    finish(w, &path)
}

/// One `structure.csv` row.
#[derive(Debug, Clone, PartialEq)]
pub struct StructureRow {
    pub s_rel: f64,
    pub category: String,
    pub fraction: f64,
}

fn structure_rows(s_rel: f64, bins: &[f64], types: [f64; 3]) -> Vec<StructureRow> {
    let mut out: Vec<StructureRow> = bins
        .iter()
        .enumerate()
        .map(|(b, &fraction)| StructureRow {
            s_rel,
            category: format!("layer_bin_{b}"),
            fraction,
        })
        .collect();
    for (name, fraction) in ["attention", "mlp", "residual"].into_iter().zip(types) {
        out.push(StructureRow {
            s_rel,
            category: name.into(),
            fraction,
        });
    }
    out
}

/// Per-size composition averaged over instances.
pub(crate) fn structure_from_results(grid: &SizeGrid, n_bins: usize, results: &[InstanceResult]) -> Vec<StructureRow> {
    let ok: Vec<&InstanceResult> = ok_results(results).collect();
    if ok.is_empty() {
        return Vec::new();
    }
    let n = ok.len() as f64;
    let mut rows = Vec::new();
    for (g, &s) in grid.values().iter().enumerate() {
        let mut bins = vec![0.0; n_bins];
        let mut types = [0.0; 3];
        for r in &ok {
            for (acc, v) in bins.iter_mut().zip(&r.layer_bins[g]) {
                *acc += v / n;
            }
            let t = r.types[g];
            types[0] += t.attention / n;
            types[1] += t.mlp / n;
            types[2] += t.residual / n;
        }
        rows.extend(structure_rows(s, &bins, types));
    }
    rows
}

pub(crate) fn freqcurves_from_results(
    grid: &SizeGrid,
    n_layers: usize,
    n_heads: usize,
    results: &[InstanceResult],
) -> Result<Vec<(f64, FrequencyCurve)>> {
    let ok: Vec<&InstanceResult> = ok_results(results).collect();
    if ok.is_empty() {
        return Ok(Vec::new());
    }
    let universe = component_universe(n_layers, n_heads);
    grid.values()
        .iter()
        .enumerate()
        .map(|(g, &s)| {
            let mut sums = vec![0usize; universe.len()];
            for r in &ok {
                for (acc, c) in sums.iter_mut().zip(&r.component_counts[g]) {
                    *acc += c;
                }
            }
            let curve = FrequencyCurve::from_counts(universe.iter().copied().zip(sums).collect())?;
            Ok((s, curve))
        })
        .collect()
}

pub fn write_structure_csv(path: &Path, rows: &[StructureRow]) -> Result<PathBuf> {
    let mut w = csv_writer(path)?;
    w.write_record(["s_rel", "category", "fraction"])?;
    for r in rows {
        w.write_record([r.s_rel.to_string(), r.category.clone(), r.fraction.to_string()])?;
    }
    finish(w, path)
}

pub fn write_freqcurve_csv(path: &Path, curves: &[(f64, FrequencyCurve)]) -> Result<PathBuf> {
    let mut w = csv_writer(path)?;
    w.write_record(["s_rel", "x_fraction", "y_cumulative"])?;
    for (s, curve) in curves {
        for (x, y) in &curve.points {
            w.write_record([s.to_string(), x.to_string(), y.to_string()])?;
        }
    }
    finish(w, path)
}

pub(crate) fn write_trace_dumps(path: &Path, results: &[InstanceResult]) -> Result<PathBuf> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for d in ok_results(results).flat_map(|r| &r.dumps) {
        serde_json::to_writer(&mut w, d)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(path.to_path_buf())
}

/// Reads a JSON-lines file of trace dumps.
pub fn read_trace_dumps(path: &Path) -> Result<Vec<TraceDump>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

struct DumpGroup {
    layers: usize,
    heads: usize,
    traces: Vec<Vec<EdgeId>>,
}

/// Groups dumps by grid size (falls back to the realized relative size).
fn group_dumps(dumps: &[TraceDump]) -> Result<Vec<(f64, DumpGroup)>> {
    let mut groups: BTreeMap<u64, (f64, DumpGroup)> = BTreeMap::new();
    for d in dumps {
        let s = d.grid_s_rel.unwrap_or(d.rel_size);
        let edges = d.parse_edges()?;
        let layers = d
            .layers
            .or_else(|| edges.iter().map(|e| e.layer()).max())
            .ok_or(Error::EmptyInput("trace dump without layer information"))?;
        let heads = d.heads.unwrap_or_else(|| {
            edges
                .iter()
                .filter_map(|e| match e {
                    EdgeId::Attn { head, .. } => Some(*head),
                    _ => None,
                })
                .max()
                .unwrap_or(1)
        });
        let entry = groups.entry(s.to_bits()).or_insert_with(|| {
            (
                s,
                DumpGroup {
                    layers,
                    heads,
                    traces: Vec::new(),
                },
            )
        });
        entry.1.layers = entry.1.layers.max(layers);
        entry.1.heads = entry.1.heads.max(heads);
        entry.1.traces.push(edges);
    }
    Ok(groups.into_values().collect())
}

pub fn structure_from_dumps(dumps: &[TraceDump], n_bins: usize) -> Result<Vec<StructureRow>> {
    let mut rows = Vec::new();
    for (s, group) in group_dumps(dumps)? {
        let n = group.traces.len() as f64;
        let mut bins = vec![0.0; n_bins];
        let mut types = [0.0; 3];
        for edges in &group.traces {
            for (acc, v) in bins.iter_mut().zip(layer_composition(edges, group.layers, n_bins)?) {
                *acc += v / n;
            }
            let t = type_composition(edges)?;
            types[0] += t.attention / n;
            types[1] += t.mlp / n;
            types[2] += t.residual / n;
        }
        rows.extend(structure_rows(s, &bins, types));
    }
    Ok(rows)
}

pub fn freqcurve_from_dumps(dumps: &[TraceDump]) -> Result<Vec<(f64, FrequencyCurve)>> {
    group_dumps(dumps)?
        .into_iter()
        .map(|(s, g)| {
            let curve = component_frequency_curve(g.traces.iter().map(|t| t.as_slice()), g.layers, g.heads)?;
            Ok((s, curve))
        })
        .collect()
}

/// One `density.csv` row. Numeric fields are empty for skipped instances.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct DensityRow {
    pub instance_id: usize,
    pub density: Option<f64>,
    pub entropy: Option<f64>,
    pub loss: Option<f64>,
    pub top1_token: Option<usize>,
    pub top1_freq: Option<f64>,
    pub status: String,
}

impl DensityRow {
    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }
}

impl From<&InstanceResult> for DensityRow {
    fn from(r: &InstanceResult) -> Self {
        let ok = r.is_ok();
        let opt = |v: f64| ok.then_some(v);
        Self {
            instance_id: r.instance_id,
            density: opt(r.density),
            entropy: opt(r.entropy),
            loss: opt(r.loss),
            top1_token: ok.then_some(r.top1_token),
            top1_freq: opt(r.top1_freq),
            status: if ok { "ok" } else { "skipped" }.into(),
        }
    }
}

pub fn read_density_csv(path: &Path) -> Result<Vec<DensityRow>> {
    csv_reader(path)?
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct NucleusRow {
    pub instance_id: usize,
    pub k_percent: f64,
    pub s_min_rel: Option<f64>,
}

pub fn read_nucleus_csv(path: &Path) -> Result<Vec<NucleusRow>> {
    csv_reader(path)?
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}

/// Median minimal size per nucleus target.
#[derive(Debug, Clone, PartialEq)]
pub struct NucleusSummary {
    pub k_percent: f64,
    /// Lower median over instances, counting "not reached" as larger than
    /// any size; `None` when that median is "not reached".
    pub median_s_min: Option<f64>,
    pub reached: usize,
    pub total: usize,
}

pub fn nucleus_summary(rows: &[NucleusRow]) -> Vec<NucleusSummary> {
    let mut by_k: BTreeMap<u64, (f64, Vec<f64>)> = BTreeMap::new();
    for r in rows {
        by_k.entry(r.k_percent.to_bits())
            .or_insert_with(|| (r.k_percent, Vec::new()))
            .1
            .push(r.s_min_rel.unwrap_or(f64::INFINITY));
    }
    let mut out: Vec<NucleusSummary> = by_k
        .into_values()
        .map(|(k, mut v)| {
            v.sort_by(f64::total_cmp);
            let median = v[(v.len() - 1) / 2];
            NucleusSummary {
                k_percent: k,
                median_s_min: median.is_finite().then_some(median),
                reached: v.iter().filter(|x| x.is_finite()).count(),
                total: v.len(),
            }
        })
        .collect();
    out.sort_by(|a, b| a.k_percent.total_cmp(&b.k_percent));
    out
}

pub fn write_nucleus_summary_csv(path: &Path, summary: &[NucleusSummary]) -> Result<PathBuf> {
    let mut w = csv_writer(path)?;
    w.write_record(["k_percent", "median_s_min_rel", "reached", "total"])?;
    for s in summary {
        w.write_record([
            s.k_percent.to_string(),
            s.median_s_min.map(|v| v.to_string()).unwrap_or_default(),
            s.reached.to_string(),
            s.total.to_string(),
        ])?;
    }
    finish(w, path)
}

pub fn write_correlations_csv(path: &Path, table: &super::CorrelationTable) -> Result<PathBuf> {
    let mut w = csv_writer(path)?;
    w.write_record(["quantity", "rho", "n"])?;
    for c in &table.rows {
        w.write_record([
            c.against.to_string(),
            c.rho.map(|v| v.to_string()).unwrap_or_default(),
            table.n.to_string(),
        ])?;
    }
    finish(w, path)
}
