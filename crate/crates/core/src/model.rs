// SPDX-License-Identifier: MIT OR Apache-2.0

//! Pre-norm decoder-only transformer with a decomposed forward pass.
//!
//! The decomposed pass records every node state and every edge vector so
//! that, for each token `i` and layer `l`,
//!
//! ```text
//! z[l][i] = h[l-1][i] + sum_{k, j<=i} a[l,k][i,j] * O_k(V_k(norm(h[l-1][j])))
//! h[l][i] = z[l][i]   + mlp_l(norm(z[l][i]))
//! ```
//!
//! holds to accumulation precision. There are no bias terms, so a zero
//! residual state maps to zero logits and hence a uniform distribution.

use std::io::Write;
use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{rms_norm_into, softmax, softmax_in_place, SeededRng};

pub const WEIGHT_MAGIC: &[u8; 8] = b"STRACEWB";
pub const WEIGHT_VERSION: u8 = 0x01;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Gelu,
    Silu,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            // tanh approximation
            Activation::Gelu => {
                const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
                0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
            }
            Activation::Silu => x / (1.0 + (-x).exp()),
        }
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub norm_eps: f64,
    pub activation: Activation,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_head", self.d_head),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq", self.max_seq),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be >= 1")));
            }
        }
        if !(self.norm_eps.is_finite() && self.norm_eps > 0.0) {
            return Err(Error::InvalidConfig("norm_eps must be > 0".into()));
        }
        Ok(())
    }

    /// Width of the concatenated head space, `n_heads * d_head`.
    pub fn attn_width(&self) -> usize {
        self.n_heads * self.d_head
    }
}

/// Dense row-major matrix; `matvec` computes `W x`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn matvec_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        for (r, o) in out.iter_mut().enumerate().take(self.rows) {
            *o = dot(self.row(r), x);
        }
    }

    /// `W[:, col_range] x` written into `out` (length `rows`).
    fn matvec_cols_into(&self, cols: std::ops::Range<usize>, x: &[f64], out: &mut [f64]) {
        for (r, o) in out.iter_mut().enumerate() {
            *o = dot(&self.row(r)[cols.clone()], x);
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Vec<f64>,
    /// `[n_heads * d_head, d_model]`, head `k` owns rows `k*d_head..(k+1)*d_head`.
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    /// `[d_model, n_heads * d_head]`, head `k` owns the matching column block.
    pub wo: Matrix,
    pub mlp_norm: Vec<f64>,
    /// `[d_ff, d_model]`
    pub w_in: Matrix,
    /// `[d_model, d_ff]`
    pub w_out: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    /// `[vocab_size, d_model]`
    pub tok_embed: Matrix,
    /// `[max_seq, d_model]`
    pub pos_embed: Matrix,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Vec<f64>,
    /// `[vocab_size, d_model]`
    pub unembed: Matrix,
}

impl Weights {
    /// All-zero weights (gains included). Every forward pass yields the
    /// uniform distribution.
    pub fn zeros(config: &ModelConfig) -> Self {
        let d = config.d_model;
        let w = config.attn_width();
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights {
                attn_norm: vec![0.0; d],
                wq: Matrix::zeros(w, d),
                wk: Matrix::zeros(w, d),
                wv: Matrix::zeros(w, d),
                wo: Matrix::zeros(d, w),
                mlp_norm: vec![0.0; d],
                w_in: Matrix::zeros(config.d_ff, d),
                w_out: Matrix::zeros(d, config.d_ff),
            })
            .collect();
        Self {
            tok_embed: Matrix::zeros(config.vocab_size, d),
            pos_embed: Matrix::zeros(config.max_seq, d),
            layers,
            final_norm: vec![0.0; d],
            unembed: Matrix::zeros(config.vocab_size, d),
        }
    }

    /// Ordered tensor manifest: `(name, shape, data)`.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out: Vec<(String, Vec<usize>, &[f64])> = Vec::new();
        fn mat(name: String, m: &Matrix) -> (String, Vec<usize>, &[f64]) {
            (name, vec![m.rows, m.cols], m.data.as_slice())
        }
        out.push(mat("tok_embed".into(), &self.tok_embed));
        out.push(mat("pos_embed".into(), &self.pos_embed));
        for (l, lw) in self.layers.iter().enumerate() {
            out.push((format!("layers.{l}.attn_norm"), vec![lw.attn_norm.len()], &lw.attn_norm));
            out.push(mat(format!("layers.{l}.wq"), &lw.wq));
            out.push(mat(format!("layers.{l}.wk"), &lw.wk));
            out.push(mat(format!("layers.{l}.wv"), &lw.wv));
            out.push(mat(format!("layers.{l}.wo"), &lw.wo));
            out.push((format!("layers.{l}.mlp_norm"), vec![lw.mlp_norm.len()], &lw.mlp_norm));
            out.push(mat(format!("layers.{l}.w_in"), &lw.w_in));
            out.push(mat(format!("layers.{l}.w_out"), &lw.w_out));
        }
        out.push(("final_norm".into(), vec![self.final_norm.len()], &self.final_norm));
        out.push(mat("unembed".into(), &self.unembed));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = vec![&mut self.tok_embed.data, &mut self.pos_embed.data];
        for lw in &mut self.layers {
            out.push(&mut lw.attn_norm);
            out.push(&mut lw.wq.data);
            out.push(&mut lw.wk.data);
            out.push(&mut lw.wv.data);
            out.push(&mut lw.wo.data);
            out.push(&mut lw.mlp_norm);
            out.push(&mut lw.w_in.data);
            out.push(&mut lw.w_out.data);
        }
        out.push(&mut self.final_norm);
        out.push(&mut self.unembed.data);
        out
    }
}

/// Token ids `t_1..t_n`, non-empty.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSequence(Vec<u32>);

impl TokenSequence {
    pub fn new(tokens: Vec<u32>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::EmptyInput("token sequence"));
        }
        Ok(Self(tokens))
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Everything recorded by [`Model::forward_decomposed`].
///
/// Layers, tokens and heads are addressed 1-based in the accessors
/// (`h` additionally accepts layer 0). Storage is flat and public so that
/// downstream tools can serialize it.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardRecord {
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_tokens: usize,
    pub d_model: usize,
    /// `[(L+1), n, d]`
    pub h: Vec<f64>,
    /// `[L, n, d]`, layer `l` stored at `l-1`
    pub z: Vec<f64>,
    /// `[L, N_H, n (target), n (source)]`, zero above the diagonal
    pub attn_weights: Vec<f64>,
    /// O-projected value vector per source token: `[L, N_H, n, d]`
    pub head_out: Vec<f64>,
    /// `[L, n, d]`
    pub mlp_out: Vec<f64>,
    /// Next-token distribution.
    pub probs: Vec<f64>,
}

impl ForwardRecord {
    fn vec_at(buf: &[f64], idx: usize, d: usize) -> &[f64] {
        &buf[idx * d..(idx + 1) * d]
    }

    pub fn h(&self, layer: usize, token: usize) -> &[f64] {
        Self::vec_at(&self.h, layer * self.n_tokens + token - 1, self.d_model)
    }

    pub fn z(&self, layer: usize, token: usize) -> &[f64] {
        Self::vec_at(&self.z, (layer - 1) * self.n_tokens + token - 1, self.d_model)
    }

    pub fn attn_weight(&self, layer: usize, head: usize, target: usize, source: usize) -> f64 {
        let n = self.n_tokens;
        self.attn_weights[(((layer - 1) * self.n_heads + head - 1) * n + target - 1) * n + source - 1]
    }

    pub fn head_output(&self, layer: usize, head: usize, source: usize) -> &[f64] {
        let idx = ((layer - 1) * self.n_heads + head - 1) * self.n_tokens + source - 1;
        Self::vec_at(&self.head_out, idx, self.d_model)
    }

    /// The vector moved from `source` to `target` by `head` at `layer`.
    pub fn attn_contribution(&self, layer: usize, head: usize, target: usize, source: usize) -> Vec<f64> {
        let a = self.attn_weight(layer, head, target, source);
        self.head_output(layer, head, source).iter().map(|v| a * v).collect()
    }

    pub fn mlp_contribution(&self, layer: usize, token: usize) -> &[f64] {
        Self::vec_at(&self.mlp_out, (layer - 1) * self.n_tokens + token - 1, self.d_model)
    }

    pub fn final_state(&self) -> &[f64] {
        self.h(self.n_layers, self.n_tokens)
    }

    /// Checks that every buffer has the length implied by the dimensions.
    pub fn validate(&self) -> Result<()> {
        let (l, k, n, d) = (self.n_layers, self.n_heads, self.n_tokens, self.d_model);
        if l == 0 || k == 0 || n == 0 || d == 0 {
            return Err(Error::IncompleteRecord("zero dimension".into()));
        }
        let checks = [
            ("h", self.h.len(), (l + 1) * n * d),
            ("z", self.z.len(), l * n * d),
            ("attn_weights", self.attn_weights.len(), l * k * n * n),
            ("head_out", self.head_out.len(), l * k * n * d),
            ("mlp_out", self.mlp_out.len(), l * n * d),
        ];
        for (name, got, want) in checks {
            if got != want {
                return Err(Error::IncompleteRecord(format!(
                    "{name} has {got} values, expected {want}"
                )));
            }
        }
        if self.probs.is_empty() {
            return Err(Error::IncompleteRecord("missing output distribution".into()));
        }
        Ok(())
    }
}

/// Per-layer attention inputs shared by the decomposed and masked passes.
pub(crate) struct LayerAttention {
    /// `[n, N_H * d_head]`
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    /// O-projected values `[N_H, n, d]`
    pub head_out: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub weights: Weights,
}

impl Model {
    pub fn new(config: ModelConfig, weights: Weights) -> Result<Self> {
        config.validate()?;
        check_shapes(&config, &weights)?;
        for (name, _, data) in weights.tensors() {
            if data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("tensor `{name}`")));
            }
        }
        Ok(Self { config, weights })
    }

    /// Seeded random initialisation: norm gains 1, every matrix drawn from
    /// N(0, 0.02^2) in manifest order and rounded to `f32` so that the
    /// weight file round-trips bit for bit.
    pub fn random(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut weights = Weights::zeros(&config);
        let mut rng = SeededRng::new(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let is_gain: Vec<bool> = weights.tensors().iter().map(|(_, s, _)| s.len() == 1).collect();
        for (data, gain) in weights.tensors_mut().into_iter().zip(is_gain) {
            for v in data.iter_mut() {
                *v = if gain {
                    1.0
                } else {
                    normal.sample(&mut rng) as f32 as f64
                };
            }
        }
        Ok(Self { config, weights })
    }

    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let weights = Weights::zeros(&config);
        Ok(Self { config, weights })
    }

    // ---- weight file I/O -------------------------------------------------

    pub fn to_bytes(&self) -> Vec<u8> {
        let tensors = self.weights.tensors();
        let header = Header {
            config: self.config.clone(),
            tensors: tensors
                .iter()
                .map(|(name, shape, _)| TensorEntry {
                    name: name.clone(),
                    shape: shape.clone(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let payload: usize = tensors.iter().map(|(_, _, d)| d.len() * 4).sum();
        let mut out = Vec::with_capacity(13 + json.len() + payload);
        out.extend_from_slice(WEIGHT_MAGIC);
        out.push(WEIGHT_VERSION);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, _, data) in &tensors {
            for &v in *data {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { buf: bytes, pos: 0 };
        if cur.take(8)? != WEIGHT_MAGIC {
            return Err(Error::BadMagic);
        }
        let version = cur.take(1)?[0];
        if version != WEIGHT_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let hlen = u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize;
        let header: Header = serde_json::from_slice(cur.take(hlen)?).map_err(|e| Error::Header(e.to_string()))?;
        let config = header.config;
        config.validate()?;

        let mut weights = Weights::zeros(&config);
        let expected: Vec<(String, Vec<usize>)> = weights.tensors().into_iter().map(|(n, s, _)| (n, s)).collect();
        if header.tensors.len() != expected.len() {
            return Err(Error::Header(format!(
                "manifest lists {} tensors, expected {}",
                header.tensors.len(),
                expected.len()
            )));
        }
        for (entry, (name, shape)) in header.tensors.iter().zip(&expected) {
            if &entry.name != name {
                return Err(Error::Header(format!(
                    "tensor `{}` out of order, expected `{name}`",
                    entry.name
                )));
            }
            if &entry.shape != shape {
                return Err(Error::ShapeMismatch {
                    name: name.clone(),
                    expected: shape.clone(),
                    actual: entry.shape.clone(),
                });
            }
        }
        for (data, (name, _)) in weights.tensors_mut().into_iter().zip(&expected) {
            let raw = cur.take(data.len() * 4)?;
            for (v, chunk) in data.iter_mut().zip(raw.chunks_exact(4)) {
                let x = f32::from_le_bytes(chunk.try_into().unwrap());
                if !x.is_finite() {
                    return Err(Error::NonFinite(format!("tensor `{name}`")));
                }
                *v = x as f64;
            }
        }
        if cur.pos != bytes.len() {
            return Err(Error::Header(format!(
                "{} trailing bytes after payload",
                bytes.len() - cur.pos
            )));
        }
        Ok(Self { config, weights })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Hex SHA-256 of the serialized weight file.
    pub fn content_hash(&self) -> String {
        Sha256::digest(self.to_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    // ---- forward passes ---------------------------------------------------

    fn check_tokens(&self, tokens: &TokenSequence) -> Result<()> {
        if tokens.len() > self.config.max_seq {
            return Err(Error::SequenceTooLong {
                len: tokens.len(),
                max: self.config.max_seq,
            });
        }
        if let Some(&t) = tokens
            .as_slice()
            .iter()
            .find(|&&t| t as usize >= self.config.vocab_size)
        {
            return Err(Error::TokenOutOfRange {
                token: t,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// `h^0`, flat `[n, d]`: token embedding plus learned position embedding.
    pub(crate) fn embed(&self, tokens: &TokenSequence) -> Result<Vec<f64>> {
        self.check_tokens(tokens)?;
        let d = self.config.d_model;
        let mut h = vec![0.0; tokens.len() * d];
        for (i, &t) in tokens.as_slice().iter().enumerate() {
            let tok = self.weights.tok_embed.row(t as usize);
            let pos = self.weights.pos_embed.row(i);
            for ((o, a), b) in h[i * d..(i + 1) * d].iter_mut().zip(tok).zip(pos) {
                *o = a + b;
            }
        }
        Ok(h)
    }

    /// Queries, keys and O-projected values for every token of layer `layer`
    /// (0-based) given the incoming states `h` (flat `[n, d]`).
    pub(crate) fn layer_attention(&self, layer: usize, h: &[f64]) -> LayerAttention {
        let cfg = &self.config;
        let lw = &self.weights.layers[layer];
        let (d, dh, nh, w) = (cfg.d_model, cfg.d_head, cfg.n_heads, cfg.attn_width());
        let n = h.len() / d;
        let mut q = vec![0.0; n * w];
        let mut k = vec![0.0; n * w];
        let mut head_out = vec![0.0; nh * n * d];
        let mut x = vec![0.0; d];
        let mut v = vec![0.0; w];
        for j in 0..n {
            rms_norm_into(&h[j * d..(j + 1) * d], &lw.attn_norm, cfg.norm_eps, &mut x);
            lw.wq.matvec_into(&x, &mut q[j * w..(j + 1) * w]);
            lw.wk.matvec_into(&x, &mut k[j * w..(j + 1) * w]);
            lw.wv.matvec_into(&x, &mut v);
            for head in 0..nh {
                let cols = head * dh..(head + 1) * dh;
                let out = &mut head_out[(head * n + j) * d..(head * n + j + 1) * d];
                lw.wo.matvec_cols_into(cols.clone(), &v[cols], out);
            }
        }
        LayerAttention { q, k, head_out }
    }

    /// Scaled dot-product logits of target `i` against sources `0..=i`.
    pub(crate) fn attn_logits(&self, att: &LayerAttention, head: usize, i: usize, out: &mut [f64]) {
        let (dh, w) = (self.config.d_head, self.config.attn_width());
        let scale = 1.0 / (dh as f64).sqrt();
        let qi = &att.q[i * w + head * dh..i * w + (head + 1) * dh];
        for (j, o) in out.iter_mut().enumerate().take(i + 1) {
            *o = dot(qi, &att.k[j * w + head * dh..j * w + (head + 1) * dh]) * scale;
        }
    }

    /// `mlp_l(norm(z))` for a single state; `layer` is 0-based.
    pub(crate) fn mlp(&self, layer: usize, z: &[f64], out: &mut [f64]) {
        let cfg = &self.config;
        let lw = &self.weights.layers[layer];
        let mut x = vec![0.0; cfg.d_model];
        rms_norm_into(z, &lw.mlp_norm, cfg.norm_eps, &mut x);
        let mut hidden = vec![0.0; cfg.d_ff];
        lw.w_in.matvec_into(&x, &mut hidden);
        for v in &mut hidden {
            *v = cfg.activation.apply(*v);
        }
        lw.w_out.matvec_into(&hidden, out);
    }

    /// `softmax(unembed · final_norm(state))`.
    pub fn logits_from_state(&self, state: &[f64]) -> Result<Vec<f64>> {
        let d = self.config.d_model;
        if state.len() != d {
            return Err(Error::LengthMismatch {
                what: "residual state",
                expected: d,
                actual: state.len(),
            });
        }
        let mut x = vec![0.0; d];
        rms_norm_into(state, &self.weights.final_norm, self.config.norm_eps, &mut x);
        let mut logits = vec![0.0; self.config.vocab_size];
        self.weights.unembed.matvec_into(&x, &mut logits);
        softmax(&logits)
    }

    /// Standard fused forward pass. Heads are mixed in value space, then
    /// concatenated and projected once through `W_O`.
    pub fn forward_plain(&self, tokens: &TokenSequence) -> Result<Vec<f64>> {
        let cfg = &self.config;
        let (d, dh, nh, w) = (cfg.d_model, cfg.d_head, cfg.n_heads, cfg.attn_width());
        let mut h = self.embed(tokens)?;
        let n = tokens.len();
        let mut x = vec![0.0; d];
        let mut q = vec![0.0; n * w];
        let mut k = vec![0.0; n * w];
        let mut v = vec![0.0; n * w];
        let mut scores = vec![0.0; n];
        let mut ctx = vec![0.0; w];
        let mut attn_out = vec![0.0; d];
        let mut mlp_out = vec![0.0; d];
        let scale = 1.0 / (dh as f64).sqrt();
        for (l, lw) in self.weights.layers.iter().enumerate() {
            for j in 0..n {
                rms_norm_into(&h[j * d..(j + 1) * d], &lw.attn_norm, cfg.norm_eps, &mut x);
                lw.wq.matvec_into(&x, &mut q[j * w..(j + 1) * w]);
                lw.wk.matvec_into(&x, &mut k[j * w..(j + 1) * w]);
                lw.wv.matvec_into(&x, &mut v[j * w..(j + 1) * w]);
            }
            let mut z = h.clone();
            for i in 0..n {
                ctx.iter_mut().for_each(|c| *c = 0.0);
                for head in 0..nh {
                    let hs = head * dh..(head + 1) * dh;
                    let qi = &q[i * w..(i + 1) * w][hs.clone()];
                    for j in 0..=i {
                        scores[j] = dot(qi, &k[j * w..(j + 1) * w][hs.clone()]) * scale;
                    }
                    softmax_in_place(&mut scores[..=i]);
                    for j in 0..=i {
                        let vj = &v[j * w..(j + 1) * w][hs.clone()];
                        for (c, &vv) in ctx[hs.clone()].iter_mut().zip(vj) {
                            *c += scores[j] * vv;
                        }
                    }
                }
                lw.wo.matvec_into(&ctx, &mut attn_out);
                for (zz, a) in z[i * d..(i + 1) * d].iter_mut().zip(&attn_out) {
                    *zz += a;
                }
            }
            for i in 0..n {
                self.mlp(l, &z[i * d..(i + 1) * d], &mut mlp_out);
                for ((hh, zz), m) in h[i * d..(i + 1) * d]
                    .iter_mut()
                    .zip(&z[i * d..(i + 1) * d])
                    .zip(&mlp_out)
                {
                    *hh = zz + m;
                }
            }
        }
        self.logits_from_state(&h[(n - 1) * d..n * d])
    }

    /// Forward pass that records every node state and edge vector.
    pub fn forward_decomposed(&self, tokens: &TokenSequence) -> Result<ForwardRecord> {
        let cfg = &self.config;
        let (d, nh, nl) = (cfg.d_model, cfg.n_heads, cfg.n_layers);
        let n = tokens.len();
        let h0 = self.embed(tokens)?;
        let mut rec = ForwardRecord {
            n_layers: nl,
            n_heads: nh,
            n_tokens: n,
            d_model: d,
            h: Vec::with_capacity((nl + 1) * n * d),
            z: Vec::with_capacity(nl * n * d),
            attn_weights: vec![0.0; nl * nh * n * n],
            head_out: Vec::with_capacity(nl * nh * n * d),
            mlp_out: Vec::with_capacity(nl * n * d),
            probs: Vec::new(),
        };
        rec.h.extend_from_slice(&h0);
        let mut h = h0;
        let mut z = vec![0.0; n * d];
        let mut m = vec![0.0; d];
        for l in 0..nl {
            let att = self.layer_attention(l, &h);
            for i in 0..n {
                let zi = &mut z[i * d..(i + 1) * d];
                zi.copy_from_slice(&h[i * d..(i + 1) * d]);
                for head in 0..nh {
                    let base = ((l * nh + head) * n + i) * n;
                    let a = &mut rec.attn_weights[base..base + n];
                    self.attn_logits(&att, head, i, a);
                    softmax_in_place(&mut a[..=i]);
                    for (j, &aj) in a[..=i].iter().enumerate() {
                        let o = &att.head_out[(head * n + j) * d..(head * n + j + 1) * d];
                        for (zz, &oo) in zi.iter_mut().zip(o) {
                            *zz += aj * oo;
                        }
                    }
                }
            }
            rec.head_out.extend_from_slice(&att.head_out);
            for i in 0..n {
                let zi = &z[i * d..(i + 1) * d];
                self.mlp(l, zi, &mut m);
                rec.mlp_out.extend_from_slice(&m);
                for ((hh, zz), mm) in h[i * d..(i + 1) * d].iter_mut().zip(zi).zip(&m) {
                    *hh = zz + mm;
                }
            }
            rec.z.extend_from_slice(&z);
            rec.h.extend_from_slice(&h);
        }
        rec.probs = self.logits_from_state(&h[(n - 1) * d..n * d])?;
        Ok(rec)
    }
}

fn check_shapes(config: &ModelConfig, weights: &Weights) -> Result<()> {
    let reference = Weights::zeros(config);
    let want = reference.tensors();
    let got = weights.tensors();
    if want.len() != got.len() {
        return Err(Error::InvalidConfig(format!(
            "weights have {} tensors, config implies {}",
            got.len(),
            want.len()
        )));
    }
    for ((name, ws, _), (_, gs, data)) in want.iter().zip(&got) {
        if ws != gs || data.len() != ws.iter().product::<usize>() {
            return Err(Error::ShapeMismatch {
                name: name.clone(),
                expected: ws.clone(),
                actual: gs.clone(),
            });
        }
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    #[serde(flatten)]
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::UnexpectedEof)?;
        if end > self.buf.len() {
            return Err(Error::UnexpectedEof);
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
}
