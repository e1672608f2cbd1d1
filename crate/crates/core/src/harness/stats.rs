// SPDX-License-Identifier: MIT OR Apache-2.0

//! Cross-instance and cross-model correlation studies.

use std::collections::BTreeMap;

use super::report::DensityRow;
use crate::error::{Error, Result};
use crate::metrics::spearman;

#[derive(Debug, Clone, PartialEq)]
pub struct Correlation {
    pub against: &'static str,
    /// `None` when a column has zero rank variance.
    pub rho: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationTable {
    pub n: usize,
    pub rows: Vec<Correlation>,
}

/// Spearman correlation of density against entropy, loss and the corpus
/// frequency of the top-1 token, over instances with status `ok`.
pub fn correlate(rows: &[DensityRow]) -> Result<CorrelationTable> {
    let ok: Vec<&DensityRow> = rows
        .iter()
        .filter(|r| {
            r.is_ok() && r.density.is_some() && r.entropy.is_some() && r.loss.is_some() && r.top1_freq.is_some()
        })
        .collect();
    if ok.len() < 2 {
        return Err(Error::EmptyInput("correlation needs at least two ok instances"));
    }
    let density: Vec<f64> = ok.iter().map(|r| r.density.unwrap()).collect();
    let column = |name: &'static str, f: fn(&DensityRow) -> f64| {
        let ys: Vec<f64> = ok.iter().map(|r| f(r)).collect();
        Correlation {
            against: name,
            rho: spearman(&density, &ys).ok(),
        }
    };
    Ok(CorrelationTable {
        n: ok.len(),
        rows: vec![
            column("entropy", |r| r.entropy.unwrap()),
            column("loss", |r| r.loss.unwrap()),
            column("top1_freq", |r| r.top1_freq.unwrap()),
        ],
    })
}

/// Spearman correlation of density between two runs over their shared ok
/// instance ids. Returns `(rho, n)`.
pub fn compare_models(a: &[DensityRow], b: &[DensityRow]) -> Result<(Option<f64>, usize)> {
    let index = |rows: &[DensityRow]| -> BTreeMap<usize, f64> {
        rows.iter()
            .filter(|r| r.is_ok())
            .filter_map(|r| r.density.map(|d| (r.instance_id, d)))
            .collect()
    };
    let (ia, ib) = (index(a), index(b));
    let pairs: Vec<(f64, f64)> = ia.iter().filter_map(|(id, &x)| ib.get(id).map(|&y| (x, y))).collect();
    if pairs.is_empty() {
        return Err(Error::EmptyIntersection);
    }
    let (xs, ys): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
    Ok((spearman(&xs, &ys).ok(), xs.len()))
}
