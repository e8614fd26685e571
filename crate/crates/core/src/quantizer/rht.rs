//! Randomized Hadamard transform: seeded sign flips followed by a normalized
//! Walsh–Hadamard rotation.
//!
//! Lengths that are not a power of two are split into descending power-of-two
//! chunks (e.g. 1000 = 512 + 256 + 128 + 64 + 32 + 8), each rotated on its own.
//! The result is still an exact orthogonal map on the original length.

use crate::error::{shape_err, Result};
use crate::rng::{derive_seed, Stream};

const SIGN_STREAM: u64 = 0x5248_5453; // "RHTS"

/// ±1 diagonal for a given seed, truncated to `len`.
pub fn signs(seed: u64, len: usize) -> Vec<f32> {
    let mut s = Stream::new(derive_seed(seed, SIGN_STREAM));
    (0..len).map(|_| s.sign()).collect()
}

/// Unnormalized in-place fast Walsh–Hadamard transform; `x.len()` must be a power of two.
pub fn fwht(x: &mut [f32]) {
    let n = x.len();
    debug_assert!(n.is_power_of_two() || n == 0);
    let mut h = 1;
    while h < n {
        for block in x.chunks_exact_mut(2 * h) {
            let (lo, hi) = block.split_at_mut(h);
            for (a, b) in lo.iter_mut().zip(hi.iter_mut()) {
                let (u, v) = (*a, *b);
                *a = u + v;
                *b = u - v;
            }
        }
        h *= 2;
    }
}

fn chunks(len: usize) -> impl Iterator<Item = (usize, usize)> {
    let mut start = 0;
    let mut rest = len;
    std::iter::from_fn(move || {
        if rest == 0 {
            return None;
        }
        let size = 1usize << (usize::BITS - 1 - rest.leading_zeros());
        let out = (start, size);
        start += size;
        rest -= size;
        Some(out)
    })
}

/// `y = H (D x) / √g` in place, using `signs[..x.len()]` as `D`.
pub fn forward_in_place(x: &mut [f32], signs: &[f32]) {
    for (v, s) in x.iter_mut().zip(signs) {
        *v *= s;
    }
    for (start, size) in chunks(x.len()) {
        let c = &mut x[start..start + size];
        fwht(c);
        let norm = 1.0 / (size as f32).sqrt();
        c.iter_mut().for_each(|v| *v *= norm);
    }
}

/// Exact inverse of [`forward_in_place`]: `x = D H y / √g`.
pub fn inverse_in_place(y: &mut [f32], signs: &[f32]) {
    for (start, size) in chunks(y.len()) {
        let c = &mut y[start..start + size];
        fwht(c);
        let norm = 1.0 / (size as f32).sqrt();
        c.iter_mut().for_each(|v| *v *= norm);
    }
    for (v, s) in y.iter_mut().zip(signs) {
        *v *= s;
    }
}

pub fn rht_forward(x: &[f32], seed: u64) -> Vec<f32> {
    let mut y = x.to_vec();
    forward_in_place(&mut y, &signs(seed, x.len()));
    y
}

pub fn rht_inverse(y: &[f32], seed: u64) -> Vec<f32> {
    let mut x = y.to_vec();
    inverse_in_place(&mut x, &signs(seed, y.len()));
    x
}

/// Forward transform with an explicit diagonal, mostly for tests and oracles.
pub fn rht_forward_with_signs(x: &[f32], signs: &[f32]) -> Result<Vec<f32>> {
    if signs.len() < x.len() {
        return shape_err(format!("{} signs for a vector of {}", signs.len(), x.len()));
    }
    let mut y = x.to_vec();
    forward_in_place(&mut y, signs);
    Ok(y)
}
