//! Group-wise vector quantization in a randomized Hadamard basis.
//!
//! Per group: rotate with the RHT, normalize by the RMS of the rotated values
//! (stored as a 16-bit scale), round every `d`-dimensional slice to the
//! nearest codeword. If the group length is not a multiple of `d`, the last
//! `len % d` values are rotated with nothing and stored with 4-bit uniform
//! quantization instead.

use half::f16;

use super::codebook::Codebook;
use super::rht;
use super::uniform::to_f16;
use crate::error::Result;

/// Bits used for the sub-`d` remainder of a group.
pub const TAIL_BITS: u8 = 4;

/// Quantizes the vector part of one group (length divisible by `d`).
/// Returns the scale; writes one code per `d` values.
pub fn quantize_group(
    x: &[f32],
    signs: &[f32],
    cb: &Codebook,
    scratch: &mut Vec<f32>,
    codes: &mut [u8],
) -> Result<f16> {
    let g = x.len();
    debug_assert_eq!(g % cb.d, 0);
    let sum_sq: f64 = x.iter().map(|&v| (v as f64) * (v as f64)).sum();
    let scale = to_f16((sum_sq / g.max(1) as f64).sqrt() as f32)?;
    let s = scale.to_f32();
    if s == 0.0 {
        codes.fill(0);
        return Ok(scale);
    }
    scratch.clear();
    scratch.extend_from_slice(x);
    rht::forward_in_place(scratch, signs);
    let inv = 1.0 / s;
    scratch.iter_mut().for_each(|v| *v *= inv);
    for (c, sub) in codes.iter_mut().zip(scratch.chunks_exact(cb.d)) {
        *c = cb.nearest(sub) as u8;
    }
    Ok(scale)
}

pub fn dequantize_group(codes: &[u8], scale: f16, signs: &[f32], cb: &Codebook, out: &mut [f32]) {
    let s = scale.to_f32();
    if s == 0.0 {
        out.fill(0.0);
        return;
    }
    for (&c, dst) in codes.iter().zip(out.chunks_exact_mut(cb.d)) {
        for (o, &p) in dst.iter_mut().zip(cb.point(c as usize)) {
            *o = p * s;
        }
    }
    rht::inverse_in_place(out, signs);
}
