//! Rotary position embeddings on head-major key matrices.
//!
//! Within each head, channel pairs `(2j, 2j + 1)` are rotated by
//! `pos · θ^(−2j / head_dim)`.

use rayon::prelude::*;

use crate::error::{config_err, shape_err, Result};
use crate::linalg::Matrix;

fn rotate(
    k: &Matrix,
    positions: &[usize],
    head_dim: usize,
    theta: f64,
    sign: f64,
) -> Result<Matrix> {
    if head_dim == 0 || head_dim % 2 != 0 {
        return config_err(format!(
            "rotary embeddings need an even head_dim, got {head_dim}"
        ));
    }
    if k.cols() % head_dim != 0 {
        return shape_err(format!(
            "{} channels is not a multiple of head_dim {head_dim}",
            k.cols()
        ));
    }
    if positions.len() != k.rows() {
        return shape_err(format!(
            "{} positions for {} rows",
            positions.len(),
            k.rows()
        ));
    }
    let half = head_dim / 2;
    let inv_freq: Vec<f64> = (0..half)
        .map(|j| libm::pow(theta, -(2.0 * j as f64) / head_dim as f64))
        .collect();
    let mut out = k.clone();
    let cols = k.cols();
    out.as_mut_slice()
        .par_chunks_mut(cols.max(1))
        .zip(positions)
        .for_each(|(row, &pos)| {
            for (j, &f) in inv_freq.iter().enumerate() {
                let angle = sign * pos as f64 * f;
                let (s, c) = (libm::sin(angle) as f32, libm::cos(angle) as f32);
                for head in row.chunks_exact_mut(head_dim) {
                    let (x, y) = (head[2 * j], head[2 * j + 1]);
                    head[2 * j] = x * c - y * s;
                    head[2 * j + 1] = x * s + y * c;
                }
            }
        });
    Ok(out)
}

pub fn apply_rope(k: &Matrix, positions: &[usize], head_dim: usize, theta: f64) -> Result<Matrix> {
    rotate(k, positions, head_dim, theta, 1.0)
}

pub fn inverse_rope(
    k: &Matrix,
    positions: &[usize],
    head_dim: usize,
    theta: f64,
) -> Result<Matrix> {
    rotate(k, positions, head_dim, theta, -1.0)
}
