// SPDX-License-Identifier: MIT OR Apache-2.0

//! Reconstruction and density metrics over next-token distributions.

use std::collections::{BTreeSet, HashMap};

use crate::error::{Error, Result};

const NORMALIZATION_TOL: f64 = 1e-6;
const LOSS_FLOOR: f64 = 1e-12;

fn check_distribution(p: &[f64]) -> Result<()> {
    if p.is_empty() {
        return Err(Error::EmptyInput("distribution"));
    }
    let sum: f64 = p.iter().sum();
    if !sum.is_finite() || (sum - 1.0).abs() > NORMALIZATION_TOL {
        return Err(Error::NotNormalized { sum });
    }
    Ok(())
}

/// `0.5 * sum |P_v - Q_v|`.
pub fn total_variation(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::LengthMismatch {
            what: "distributions",
            expected: p.len(),
            actual: q.len(),
        });
    }
    check_distribution(p)?;
    check_distribution(q)?;
    let tv = 0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>();
    Ok(tv.min(1.0))
}

/// Shannon entropy in nats, with `0 ln 0 = 0`.
pub fn shannon_entropy(p: &[f64]) -> Result<f64> {
    check_distribution(p)?;
    Ok(-p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>())
}

/// Token ids sorted by descending probability, ties by ascending id.
fn ranked(p: &[f64]) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..p.len()).collect();
    ids.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    ids
}

/// Smallest top-ranked prefix whose cumulative mass reaches `k_percent / 100`.
pub fn nucleus_set(p: &[f64], k_percent: f64) -> BTreeSet<usize> {
    let target = k_percent / 100.0;
    let mut mass = 0.0;
    let mut out = BTreeSet::new();
    for id in ranked(p) {
        out.insert(id);
        mass += p[id];
        // tolerate rounding in the running sum
        if mass >= target - 1e-12 {
            break;
        }
    }
    out
}

/// The `count` highest-probability tokens under the nucleus tie rule.
pub fn top_tokens(p: &[f64], count: usize) -> BTreeSet<usize> {
    ranked(p).into_iter().take(count).collect()
}

/// Smallest grid size whose trace distribution recovers the full model's
/// top-`k%` nucleus as an exact set. `None` when no grid point does.
pub fn nucleus_reconstruction_size(full: &[f64], grid_traces: &[(f64, Vec<f64>)], k_percent: f64) -> Option<f64> {
    let nucleus = nucleus_set(full, k_percent);
    grid_traces
        .iter()
        .find(|(_, q)| top_tokens(q, nucleus.len()) == nucleus)
        .map(|(s, _)| *s)
}

/// Reconstruction error over relative trace size with endpoints 0 and 1.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityProfile {
    grid: Vec<f64>,
    errors: Vec<f64>,
}

impl DensityProfile {
    pub fn new(grid: Vec<f64>, errors: Vec<f64>) -> Result<Self> {
        if grid.len() != errors.len() {
            return Err(Error::LengthMismatch {
                what: "density errors",
                expected: grid.len(),
                actual: errors.len(),
            });
        }
        if grid.len() < 2 || grid[0] != 0.0 || *grid.last().unwrap() != 1.0 {
            return Err(Error::InvalidGrid("density grid must start at 0 and end at 1".into()));
        }
        if grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidGrid("density grid must be strictly ascending".into()));
        }
        if let Some(e) = errors.iter().find(|e| !(0.0..=1.0).contains(*e)) {
            return Err(Error::InvalidGrid(format!("error value {e} outside [0, 1]")));
        }
        Ok(Self { grid, errors })
    }

    /// Adds the endpoints: `error_at_zero` at size 0 and exact
    /// reconstruction at size 1.
    pub fn from_measurements(sizes: &[f64], errors: &[f64], error_at_zero: f64) -> Result<Self> {
        let mut grid = Vec::with_capacity(sizes.len() + 2);
        grid.push(0.0);
        grid.extend_from_slice(sizes);
        grid.push(1.0);
        let mut errs = Vec::with_capacity(errors.len() + 2);
        errs.push(error_at_zero);
        errs.extend_from_slice(errors);
        errs.push(0.0);
        Self::new(grid, errs)
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn errors(&self) -> &[f64] {
        &self.errors
    }

    /// Trapezoid rule over raw sizes.
    pub fn density(&self) -> f64 {
        trapezoid(&self.grid, &self.errors)
    }

    /// Trapezoid rule over `log10(size)`, with the zero endpoint moved onto
    /// the smallest measured size (so it contributes a zero-width panel).
    pub fn log_density(&self) -> f64 {
        let mut xs: Vec<f64> = self.grid.iter().map(|s| s.log10()).collect();
        xs[0] = xs[1];
        trapezoid(&xs, &self.errors)
    }
}

fn trapezoid(xs: &[f64], ys: &[f64]) -> f64 {
    0.5 * xs
        .windows(2)
        .zip(ys.windows(2))
        .map(|(x, y)| (x[1] - x[0]) * (y[1] + y[0]))
        .sum::<f64>()
}

/// Computational density `C`: area under the error curve.
pub fn computational_density(grid: &[f64], errors: &[f64]) -> Result<f64> {
    Ok(DensityProfile::new(grid.to_vec(), errors.to_vec())?.density())
}

/// 1-based average ranks (ties share the mean of their positions).
fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && xs[idx[end]] == xs[idx[start]] {
            end += 1;
        }
        let r = (start + end + 1) as f64 / 2.0;
        for &i in &idx[start..end] {
            ranks[i] = r;
        }
        start = end;
    }
    ranks
}

fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman rank correlation with average-rank tie handling.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::LengthMismatch {
            what: "spearman columns",
            expected: xs.len(),
            actual: ys.len(),
        });
    }
    if xs.len() < 2 {
        return Err(Error::EmptyInput("spearman needs at least two pairs"));
    }
    pearson(&average_ranks(xs), &average_ranks(ys))
}

/// Relative frequency of every token in a corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenFrequency {
    freq: HashMap<u32, f64>,
}

impl TokenFrequency {
    pub fn get(&self, token: u32) -> f64 {
        self.freq.get(&token).copied().unwrap_or(0.0)
    }

    pub fn total(&self) -> f64 {
        self.freq.values().sum()
    }
}

pub fn token_frequency<'a>(corpus: impl IntoIterator<Item = &'a u32>) -> Result<TokenFrequency> {
    let mut counts: HashMap<u32, u64> = HashMap::new();
    let mut total = 0u64;
    for &t in corpus {
        *counts.entry(t).or_default() += 1;
        total += 1;
    }
    if total == 0 {
        return Err(Error::EmptyInput("corpus"));
    }
    let freq = counts.into_iter().map(|(t, c)| (t, c as f64 / total as f64)).collect();
    Ok(TokenFrequency { freq })
}

/// Next-token negative log-likelihood, with probabilities floored at 1e-12.
pub fn lm_loss(full: &[f64], gold: usize) -> f64 {
    -full.get(gold).copied().unwrap_or(0.0).max(LOSS_FLOOR).ln()
}
