// SPDX-License-Identifier: MIT OR Apache-2.0

//! Scalar and vector primitives shared by the rest of the crate.
//!
//! Everything here accumulates in `f64`. The PRNG is ChaCha8 keyed by a
//! 64-bit seed plus a 64-bit stream id, which makes it counter-based and
//! splittable: `SeededRng::with_stream(seed, s)` for distinct `s` yields
//! independent streams that are identical on every platform.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::EmptyInput("softmax logits"));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for p in &mut out {
        *p /= sum;
    }
    Ok(out)
}

/// Softmax over a slice in place. Caller guarantees non-empty finite input.
pub(crate) fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in xs.iter_mut() {
        *x /= sum;
    }
}

/// `gain_i * x_i / sqrt(mean(x^2) + eps)`.
pub fn rms_norm(x: &[f64], gain: &[f64], eps: f64) -> Result<Vec<f64>> {
    if gain.len() != x.len() {
        return Err(Error::LengthMismatch {
            what: "rms_norm gain",
            expected: x.len(),
            actual: gain.len(),
        });
    }
    let mut out = vec![0.0; x.len()];
    rms_norm_into(x, gain, eps, &mut out);
    Ok(out)
}

pub(crate) fn rms_norm_into(x: &[f64], gain: &[f64], eps: f64, out: &mut [f64]) {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let denom = (ms + eps).sqrt();
    if denom == 0.0 {
        // only reachable with eps = 0 and an all-zero input
        out.iter_mut().for_each(|o| *o = 0.0);
        return;
    }
    for ((o, &xi), &g) in out.iter_mut().zip(x).zip(gain) {
        *o = g * xi / denom;
    }
}

/// Sum of absolute values.
pub fn l1_norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v.abs()).sum()
}

/// Deterministic uniform stream. Owned, never shared between tasks.
#[derive(Debug, Clone)]
pub struct SeededRng {
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    /// Independent sub-stream `stream` of `seed`.
    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { inner }
    }

    /// Uniform draw in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        self.inner.random::<f64>()
    }
}

impl RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}
