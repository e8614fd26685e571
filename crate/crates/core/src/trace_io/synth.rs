//! Synthetic residual-stream traces.
//!
//! Hidden states follow `h_{l+1} = h_l + α·tanh(W_l h_l)` with `W_l` a seeded
//! orthogonal map (permutation, sign flips and a normalized Hadamard
//! transform). Keys and values are linear read-outs `K_l = P^K_l h_l + σε`.
//! Each role rotates the hidden state once with its own fixed orthogonal map
//! `z = U h` and reads coordinate blocks of `z`; between layers the read-out
//! drifts towards a block no earlier layer has touched,
//! `P_l = cos(θ)·P_{l−1} + sin(θ)·E_{B_l}` with `θ = drift·α`. The new block
//! is invisible to every earlier layer, so adding older layers to a linear
//! predictor gains little, and the whole trace collapses to a single layer
//! as `α → 0`. Blocks are reused cyclically once `hidden_dim` runs out. The
//! first `sink_tokens` of every sequence are scaled up to mimic attention
//! sinks.
//!
//! Every random draw comes from a seeded integer-state stream and all
//! arithmetic is plain `f32`/`f64` in a fixed order, so output bytes are the
//! same on every platform.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{AttentionStats, KVTrace, RopeMode, TraceMeta};
use crate::error::{config_err, Result};
use crate::linalg::Matrix;
use crate::quantizer::rht;
use crate::rng::{derive_seed, Stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_layers: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    pub hidden_dim: usize,
    /// Residual step size.
    pub alpha: f64,
    /// Standard deviation of the observation noise on keys and values.
    pub noise: f64,
    pub seed: u64,
    /// Total tokens, split as evenly as possible across sequences.
    pub tokens: usize,
    pub sequences: usize,
    pub sink_tokens: usize,
    /// Factor applied to the initial hidden state of sink tokens.
    pub sink_scale: f64,
    /// Per-layer rotation of the key projection, in units of `alpha` radians.
    pub key_drift: f64,
    /// Per-layer rotation of the value projection, in units of `alpha` radians.
    pub value_drift: f64,
    pub attention_stats: bool,
    pub rope_theta: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_layers: 12,
            n_kv_heads: 4,
            head_dim: 32,
            hidden_dim: 1024,
            alpha: 0.3,
            noise: 0.1,
            seed: 7,
            tokens: 8192,
            sequences: 8,
            sink_tokens: 4,
            sink_scale: 4.0,
            key_drift: 0.7,
            value_drift: 0.95,
            attention_stats: true,
            rope_theta: 10000.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.n_kv_heads == 0 || self.head_dim == 0 || self.hidden_dim == 0
        {
            return config_err("synthetic trace dimensions must be >= 1");
        }
        if self.hidden_dim < self.n_kv_heads * self.head_dim {
            return config_err(format!(
                "hidden_dim {} is smaller than n_kv_heads * head_dim = {}",
                self.hidden_dim,
                self.n_kv_heads * self.head_dim
            ));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return config_err(format!("alpha must be in (0, 1], got {}", self.alpha));
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return config_err(format!("noise must be >= 0, got {}", self.noise));
        }
        if self.sequences == 0 || self.tokens < self.sequences {
            return config_err("need at least one token per sequence");
        }
        if !(self.sink_scale > 0.0) || !self.key_drift.is_finite() || !self.value_drift.is_finite()
        {
            return config_err("sink_scale must be positive and drifts finite");
        }
        Ok(())
    }

    pub fn sequence_lengths(&self) -> Vec<usize> {
        let base = self.tokens / self.sequences;
        let extra = self.tokens % self.sequences;
        (0..self.sequences)
            .map(|s| base + usize::from(s < extra))
            .collect()
    }
}

const H0: u64 = 0x4830;
const PROJ_K: u64 = 0x504B;
const PROJ_V: u64 = 0x5056;
const MIX: u64 = 0x4D49;
const NOISE_K: u64 = 0x4E4B;
const NOISE_V: u64 = 0x4E56;
const SALIENCE: u64 = 0x5341;

fn layer_seed(seed: u64, label: u64, layer: usize) -> u64 {
    derive_seed(derive_seed(seed, label), layer as u64)
}

/// Seeded orthogonal map: permutation followed by a randomized Hadamard transform.
struct Rotation {
    perm: Vec<usize>,
    signs: Vec<f32>,
}

impl Rotation {
    fn new(seed: u64, dim: usize) -> Self {
        let signs = rht::signs(seed, dim);
        let mut perm: Vec<usize> = (0..dim).collect();
        let mut s = Stream::new(derive_seed(seed, 1));
        for i in (1..dim).rev() {
            perm.swap(i, (s.next_u64() % (i as u64 + 1)) as usize);
        }
        Self { perm, signs }
    }

    fn apply(&self, x: &[f32], out: &mut Vec<f32>) {
        out.clear();
        out.extend(self.perm.iter().map(|&p| x[p]));
        rht::forward_in_place(out, &self.signs);
    }
}

/// Read-out weights of layer `l`: block `j` of `z` carries weight
/// `cos^l` for `j = 0` and `sin·cos^(l−j)` otherwise.
fn readout_weights(layer: usize, angle: f64) -> Vec<f32> {
    let (c, s) = (libm::cos(angle), libm::sin(angle));
    (0..=layer)
        .map(|j| {
            let w = if j == 0 { 1.0 } else { s };
            (w * libm::pow(c, (layer - j) as f64)) as f32
        })
        .collect()
}

/// `K = Σ_j w_j · z[block_j]` for every token, where `z = U h`.
fn project(h: &[f32], hidden: usize, kv: usize, rot: &Rotation, weights: &[f32]) -> Vec<f32> {
    let blocks = (hidden / kv).max(1);
    let mut out = vec![0.0f32; h.len() / hidden * kv];
    out.par_chunks_mut(kv)
        .zip(h.par_chunks(hidden))
        .for_each_init(Vec::new, |z, (dst, hr)| {
            rot.apply(hr, z);
            for (j, &w) in weights.iter().enumerate() {
                let start = (j % blocks) * kv;
                for (d, &x) in dst.iter_mut().zip(&z[start..start + kv]) {
                    *d += w * x;
                }
            }
        });
    out
}

fn add_noise(x: &mut [f32], seed: u64, sigma: f64) {
    if sigma == 0.0 {
        return;
    }
    let mut s = Stream::new(seed);
    for v in x {
        *v += s.normal_f32() * sigma as f32;
    }
}

/// Causal accumulated attention: token `j` receives
/// `exp(s_j) · Σ_{t ≥ j} 1 / Z_t` with `Z_t = Σ_{i ≤ t} exp(s_i)`.
fn accumulate_attention(salience: &[f64]) -> Vec<f32> {
    let peak = salience.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = salience.iter().map(|&s| libm::exp(s - peak)).collect();
    let mut z = Vec::with_capacity(w.len());
    let mut acc = 0.0;
    for &x in &w {
        acc += x;
        z.push(acc);
    }
    let mut out = vec![0.0f32; w.len()];
    let mut tail = 0.0;
    for j in (0..w.len()).rev() {
        tail += 1.0 / z[j];
        out[j] = (w[j] * tail) as f32;
    }
    out
}

pub fn synth_trace(cfg: &SynthConfig) -> Result<KVTrace> {
    cfg.validate()?;
    let hidden = cfg.hidden_dim;
    let kv = cfg.n_kv_heads * cfg.head_dim;
    let lengths = cfg.sequence_lengths();
    let mut meta = TraceMeta::new(cfg.n_layers, cfg.n_kv_heads, cfg.head_dim, lengths.clone());
    meta.rope_mode = RopeMode::PreRope;
    meta.rope_theta = cfg.rope_theta;
    meta.source = format!(
        "synthetic residual stream: seed={} alpha={} noise={} hidden={}",
        cfg.seed, cfg.alpha, cfg.noise, hidden
    );
    let positions = meta.positions();

    let mut h = vec![0.0f32; cfg.tokens * hidden];
    Stream::new(derive_seed(cfg.seed, H0)).fill_normal(&mut h, 1.0);
    for (row, &pos) in h.chunks_exact_mut(hidden).zip(&positions) {
        if pos < cfg.sink_tokens {
            row.iter_mut().for_each(|v| *v *= cfg.sink_scale as f32);
        }
    }

    let rot_k = Rotation::new(derive_seed(cfg.seed, PROJ_K), hidden);
    let rot_v = Rotation::new(derive_seed(cfg.seed, PROJ_V), hidden);
    let mut keys = Vec::with_capacity(cfg.n_layers);
    let mut values = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let wk = readout_weights(l, cfg.key_drift * cfg.alpha);
        let wv = readout_weights(l, cfg.value_drift * cfg.alpha);
        let mut k = project(&h, hidden, kv, &rot_k, &wk);
        let mut v = project(&h, hidden, kv, &rot_v, &wv);
        add_noise(&mut k, layer_seed(cfg.seed, NOISE_K, l), cfg.noise);
        add_noise(&mut v, layer_seed(cfg.seed, NOISE_V, l), cfg.noise);
        keys.push(Matrix::from_vec(cfg.tokens, kv, k)?);
        values.push(Matrix::from_vec(cfg.tokens, kv, v)?);

        if l + 1 < cfg.n_layers {
            let mix = Rotation::new(layer_seed(cfg.seed, MIX, l), hidden);
            let alpha = cfg.alpha as f32;
            h.par_chunks_mut(hidden).for_each_init(Vec::new, |t, row| {
                mix.apply(row, t);
                for (x, y) in row.iter_mut().zip(t.iter()) {
                    *x += alpha * libm::tanhf(*y);
                }
            });
        }
    }

    let stats = if cfg.attention_stats {
        let mut base = Stream::new(derive_seed(cfg.seed, SALIENCE));
        let token_salience: Vec<f64> = (0..cfg.tokens).map(|_| base.normal()).collect();
        let mut scores = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let mut s = Stream::new(layer_seed(cfg.seed, SALIENCE, l));
            let sal: Vec<f64> = token_salience
                .iter()
                .zip(&positions)
                .map(|(&b, &pos)| {
                    let sink = if pos < cfg.sink_tokens { 4.0 } else { 0.0 };
                    b + 0.5 * s.normal() + sink
                })
                .collect();
            let mut layer = Vec::with_capacity(cfg.tokens);
            for r in meta.sequence_ranges() {
                layer.extend(accumulate_attention(&sal[r]));
            }
            scores.push(layer);
        }
        Some(AttentionStats { scores })
    } else {
        None
    };
    KVTrace::new(meta, keys, values, stats)
}
