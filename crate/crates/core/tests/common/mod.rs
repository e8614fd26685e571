#![allow(dead_code)]

use aquakv::rng::Stream;
use aquakv::trace_io::{synth_trace, KVTrace, SynthConfig};
use aquakv::Matrix;

/// The default synthetic trace used across the acceptance checks.
pub fn frozen_trace() -> KVTrace {
    synth_trace(&SynthConfig::default()).unwrap()
}

pub fn small_trace(seed: u64) -> KVTrace {
    synth_trace(&SynthConfig {
        n_layers: 4,
        n_kv_heads: 2,
        head_dim: 16,
        hidden_dim: 128,
        tokens: 1200,
        sequences: 4,
        seed,
        ..SynthConfig::default()
    })
    .unwrap()
}

pub fn normal_matrix(rows: usize, cols: usize, std: f32, s: &mut Stream) -> Matrix {
    let mut data = vec![0.0f32; rows * cols];
    s.fill_normal(&mut data, std);
    Matrix::from_vec(rows, cols, data).unwrap()
}

pub fn same_bits(a: &Matrix, b: &Matrix) -> bool {
    a.shape() == b.shape()
        && a.as_slice()
            .iter()
            .zip(b.as_slice())
            .all(|(x, y)| x.to_bits() == y.to_bits())
}

pub fn l2(x: &[f32]) -> f64 {
    x.iter()
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt()
}

pub fn l2_diff(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| ((x - y) as f64).powi(2))
        .sum::<f64>()
        .sqrt()
}
