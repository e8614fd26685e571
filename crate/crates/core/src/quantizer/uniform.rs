//! Group-wise min-max uniform quantization with 16-bit scales and zero points.

use half::f16;

use crate::error::{Error, Result};

/// Quantizes one group. Codes are computed against the 16-bit-rounded scale
/// and zero point so that reconstruction uses exactly what is stored.
pub fn quantize_group(x: &[f32], bits: u8, codes: &mut [u8]) -> Result<(f16, f16)> {
    let levels = ((1u32 << bits) - 1) as f32;
    let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
    for &v in x {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let zero = to_f16(lo)?;
    let scale = if hi > lo {
        to_f16((hi - lo) / levels)?
    } else {
        f16::ZERO
    };
    let (s, z) = (scale.to_f32(), zero.to_f32());
    if s == 0.0 {
        codes.fill(0);
    } else {
        for (c, &v) in codes.iter_mut().zip(x) {
            *c = ((v - z) / s).round().clamp(0.0, levels) as u8;
        }
    }
    Ok((scale, zero))
}

pub fn dequantize_group(codes: &[u8], scale: f16, zero: f16, out: &mut [f32]) {
    let (s, z) = (scale.to_f32(), zero.to_f32());
    for (o, &c) in out.iter_mut().zip(codes) {
        *o = c as f32 * s + z;
    }
}

pub(crate) fn to_f16(v: f32) -> Result<f16> {
    let h = f16::from_f32(v);
    if !h.is_finite() {
        return Err(Error::OutOfRange(format!(
            "{v} does not fit a 16-bit float scale"
        )));
    }
    Ok(h)
}
