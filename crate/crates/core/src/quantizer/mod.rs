//! Backbone quantizers: the `Q` / `Q⁻¹` pair applied to predictor residuals.
//!
//! Two schemes are provided, plus a lossless pass-through:
//!
//! * [`UniformConfig`]: group-wise min-max round-to-nearest with a 16-bit
//!   scale and zero point per group.
//! * [`VqConfig`]: randomized Hadamard rotation followed by nearest-codeword
//!   rounding on a Gaussian-optimized grid, one 16-bit scale per group.
//! * [`BackboneConfig::Identity`]: stores values unchanged; accounted as an
//!   uncompressed 16-bit cache.
//!
//! A matrix is flattened along the quantization axis (row-major for
//! per-token, column-major for per-channel) and cut into contiguous groups of
//! `group_size` values; only the last group may be short.

pub mod bits;
pub mod codebook;
pub mod packing;
pub mod rht;
pub mod uniform;
pub mod vq;

use std::borrow::Cow;

use half::f16;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::linalg::Matrix;
use crate::wire::{self, Reader};

pub use bits::{effective_bits, BitsBreakdown, OverheadSpec};
pub use codebook::{build_gaussian_codebook, gaussian_codebook, Codebook};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    #[default]
    PerToken,
    PerChannel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct UniformConfig {
    pub bits: u8,
    #[serde(default = "default_uniform_group")]
    pub group_size: usize,
    #[serde(default)]
    pub axis: Axis,
}

fn default_uniform_group() -> usize {
    64
}

impl UniformConfig {
    pub fn new(bits: u8) -> Self {
        Self {
            bits,
            group_size: 64,
            axis: Axis::PerToken,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=8).contains(&self.bits) {
            return config_err(format!("uniform bits must be in [1, 8], got {}", self.bits));
        }
        if self.group_size == 0 {
            return config_err("group_size must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VqConfig {
    #[serde(default = "default_vq_group")]
    pub group_size: usize,
    pub dim: usize,
    pub codebook_size: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_vq_group() -> usize {
    1024
}

impl VqConfig {
    /// Grids with `d = 2` at 2, 3 and 4 bits per value.
    pub fn preset(bits: u8) -> Result<Self> {
        let n = match bits {
            2 => 16,
            3 => 64,
            4 => 256,
            _ => return config_err(format!("no d=2 VQ preset at {bits} bits (use 2, 3 or 4)")),
        };
        Ok(Self {
            group_size: 1024,
            dim: 2,
            codebook_size: n,
            seed: 0,
        })
    }

    /// The 2-bit grid with `d = 4`, `n = 256`.
    pub fn preset_d4() -> Self {
        Self {
            group_size: 1024,
            dim: 4,
            codebook_size: 256,
            seed: 0,
        }
    }

    pub fn is_preset(&self) -> bool {
        matches!(
            (self.dim, self.codebook_size),
            (2, 16) | (2, 64) | (2, 256) | (4, 256)
        )
    }

    pub fn code_bits(&self) -> u8 {
        self.codebook_size.trailing_zeros() as u8
    }

    pub fn bits_per_value(&self) -> f64 {
        self.code_bits() as f64 / self.dim as f64
    }

    pub fn validate(&self) -> Result<()> {
        codebook::validate_grid(self.dim, self.codebook_size)?;
        if self.group_size == 0 || self.group_size % self.dim != 0 {
            return config_err(format!(
                "VQ dimension {} must divide group size {}",
                self.dim, self.group_size
            ));
        }
        Ok(())
    }

    pub fn codebook(&self) -> Result<std::sync::Arc<Codebook>> {
        gaussian_codebook(self.dim, self.codebook_size, self.seed)
    }
}

/// A plug-in quantization operator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackboneConfig {
    Identity,
    Uniform(UniformConfig),
    Vq(VqConfig),
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        match self {
            BackboneConfig::Identity => Ok(()),
            BackboneConfig::Uniform(c) => c.validate(),
            BackboneConfig::Vq(c) => c.validate(),
        }
    }

    pub fn scheme(&self) -> Scheme {
        match self {
            BackboneConfig::Identity => Scheme::Raw,
            BackboneConfig::Uniform(_) => Scheme::Uniform,
            BackboneConfig::Vq(_) => Scheme::Vq,
        }
    }

    pub fn group_size(&self) -> usize {
        match self {
            BackboneConfig::Identity => 0,
            BackboneConfig::Uniform(c) => c.group_size,
            BackboneConfig::Vq(c) => c.group_size,
        }
    }

    pub fn axis(&self) -> Axis {
        match self {
            BackboneConfig::Uniform(c) => c.axis,
            _ => Axis::PerToken,
        }
    }

    pub fn code_bits(&self) -> u8 {
        match self {
            BackboneConfig::Identity => 32,
            BackboneConfig::Uniform(c) => c.bits,
            BackboneConfig::Vq(c) => c.code_bits(),
        }
    }

    /// Nominal storage cost per value including per-group metadata.
    pub fn bits_per_value(&self) -> f64 {
        match self {
            BackboneConfig::Identity => bits::UNCOMPRESSED_BITS as f64,
            BackboneConfig::Uniform(c) => {
                c.bits as f64 + 2.0 * bits::SCALE_BITS as f64 / c.group_size as f64
            }
            BackboneConfig::Vq(c) => {
                c.bits_per_value() + bits::SCALE_BITS as f64 / c.group_size as f64
            }
        }
    }

    /// Short human-readable label such as `vq-d2-n16-gs1024`.
    pub fn label(&self) -> String {
        match self {
            BackboneConfig::Identity => "identity16".into(),
            BackboneConfig::Uniform(c) => format!(
                "uniform-{}b-gs{}{}",
                c.bits,
                c.group_size,
                if c.axis == Axis::PerChannel {
                    "-per-channel"
                } else {
                    ""
                }
            ),
            BackboneConfig::Vq(c) => {
                format!("vq-d{}-n{}-gs{}", c.dim, c.codebook_size, c.group_size)
            }
        }
    }

    pub fn quantize(&self, x: &Matrix) -> Result<QuantizedBlock> {
        quantize(x, self)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[repr(u8)]
pub enum Scheme {
    Uniform = 0,
    Vq = 1,
    Raw = 2,
}

impl Scheme {
    fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(Scheme::Uniform),
            1 => Ok(Scheme::Vq),
            2 => Ok(Scheme::Raw),
            _ => Err(Error::Format(format!("unknown block scheme {v}"))),
        }
    }
}

/// Remainder of a VQ block shorter than the codeword dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct TailCodes {
    pub scale: f16,
    pub zero: f16,
    pub payload: Vec<u8>,
}

/// Packed output of a backbone quantizer for one matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedBlock {
    pub config: BackboneConfig,
    pub rows: usize,
    pub cols: usize,
    pub scales: Vec<f16>,
    /// Uniform scheme only.
    pub zero_points: Vec<f16>,
    /// Bit-packed codes; raw `f32` little-endian values for the identity scheme.
    pub payload: Vec<u8>,
    pub tail: Option<TailCodes>,
}

fn flatten(x: &Matrix, axis: Axis) -> Cow<'_, [f32]> {
    match axis {
        Axis::PerToken => Cow::Borrowed(x.as_slice()),
        Axis::PerChannel => {
            let (r, c) = x.shape();
            let mut out = Vec::with_capacity(r * c);
            for j in 0..c {
                for i in 0..r {
                    out.push(x.get(i, j));
                }
            }
            Cow::Owned(out)
        }
    }
}

fn unflatten(flat: Vec<f32>, rows: usize, cols: usize, axis: Axis) -> Matrix {
    match axis {
        Axis::PerToken => Matrix::from_vec(rows, cols, flat).expect("flat length matches shape"),
        Axis::PerChannel => {
            let mut m = Matrix::zeros(rows, cols);
            for j in 0..cols {
                for i in 0..rows {
                    m.set(i, j, flat[j * rows + i]);
                }
            }
            m
        }
    }
}

/// Length of the sub-`d` remainder of the last VQ group.
fn vq_tail_len(total: usize, cfg: &VqConfig) -> usize {
    let last = total % cfg.group_size;
    last % cfg.dim
}

fn n_groups(total: usize, group_size: usize) -> usize {
    total.div_ceil(group_size)
}

pub fn quantize(x: &Matrix, cfg: &BackboneConfig) -> Result<QuantizedBlock> {
    cfg.validate()?;
    x.ensure_finite()?;
    let (rows, cols) = x.shape();
    let mut block = QuantizedBlock {
        config: *cfg,
        rows,
        cols,
        scales: Vec::new(),
        zero_points: Vec::new(),
        payload: Vec::new(),
        tail: None,
    };
    match cfg {
        BackboneConfig::Identity => {
            wire::put_f32s(&mut block.payload, x.as_slice());
        }
        BackboneConfig::Uniform(u) => {
            let flat = flatten(x, u.axis);
            let mut codes = vec![0u8; flat.len()];
            let params: Vec<(f16, f16)> = flat
                .par_chunks(u.group_size)
                .zip(codes.par_chunks_mut(u.group_size))
                .map(|(g, c)| uniform::quantize_group(g, u.bits, c))
                .collect::<Result<_>>()?;
            block.scales = params.iter().map(|p| p.0).collect();
            block.zero_points = params.iter().map(|p| p.1).collect();
            block.payload = packing::pack(&codes, u.bits);
        }
        BackboneConfig::Vq(v) => {
            let cb = v.codebook()?;
            let flat = x.as_slice();
            let total = flat.len();
            let tail_len = vq_tail_len(total, v);
            let vec_len = total - tail_len;
            let signs = rht::signs(v.seed, v.group_size);
            let codes_per_group = v.group_size / v.dim;
            let mut codes = vec![0u8; vec_len / v.dim];
            block.scales = flat[..vec_len]
                .par_chunks(v.group_size)
                .zip(codes.par_chunks_mut(codes_per_group))
                .map_init(Vec::new, |scratch, (g, c)| {
                    vq::quantize_group(g, &signs, &cb, scratch, c)
                })
                .collect::<Result<_>>()?;
            // A last group made only of tail values still owns a (zero) scale slot.
            block
                .scales
                .resize(n_groups(total, v.group_size), f16::ZERO);
            block.payload = packing::pack(&codes, v.code_bits());
            if tail_len > 0 {
                let mut tcodes = vec![0u8; tail_len];
                let (scale, zero) =
                    uniform::quantize_group(&flat[vec_len..], vq::TAIL_BITS, &mut tcodes)?;
                block.tail = Some(TailCodes {
                    scale,
                    zero,
                    payload: packing::pack(&tcodes, vq::TAIL_BITS),
                });
            }
        }
    }
    Ok(block)
}

pub fn dequantize(qb: &QuantizedBlock) -> Result<Matrix> {
    qb.check_layout()?;
    let (rows, cols) = (qb.rows, qb.cols);
    let total = rows * cols;
    match &qb.config {
        BackboneConfig::Identity => {
            let mut r = Reader::new(&qb.payload);
            Matrix::from_vec(rows, cols, r.f32s(total)?)
        }
        BackboneConfig::Uniform(u) => {
            let codes = packing::unpack(&qb.payload, u.bits, total)?;
            let mut flat = vec![0.0f32; total];
            flat.par_chunks_mut(u.group_size)
                .zip(codes.par_chunks(u.group_size))
                .enumerate()
                .for_each(|(g, (out, c))| {
                    uniform::dequantize_group(c, qb.scales[g], qb.zero_points[g], out)
                });
            Ok(unflatten(flat, rows, cols, u.axis))
        }
        BackboneConfig::Vq(v) => {
            let cb = v.codebook()?;
            let tail_len = vq_tail_len(total, v);
            let vec_len = total - tail_len;
            let codes = packing::unpack(&qb.payload, v.code_bits(), vec_len / v.dim)?;
            let signs = rht::signs(v.seed, v.group_size);
            let mut flat = vec![0.0f32; total];
            flat[..vec_len]
                .par_chunks_mut(v.group_size)
                .zip(codes.par_chunks(v.group_size / v.dim))
                .enumerate()
                .for_each(|(g, (out, c))| vq::dequantize_group(c, qb.scales[g], &signs, &cb, out));
            if let Some(t) = &qb.tail {
                let tcodes = packing::unpack(&t.payload, vq::TAIL_BITS, tail_len)?;
                uniform::dequantize_group(&tcodes, t.scale, t.zero, &mut flat[vec_len..]);
            }
            Matrix::from_vec(rows, cols, flat)
        }
    }
}

impl QuantizedBlock {
    pub fn dequantize(&self) -> Result<Matrix> {
        dequantize(self)
    }

    pub fn scheme(&self) -> Scheme {
        self.config.scheme()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn n_values(&self) -> usize {
        self.rows * self.cols
    }

    pub fn n_groups(&self) -> usize {
        match self.config {
            BackboneConfig::Identity => 0,
            c => n_groups(self.n_values(), c.group_size()),
        }
    }

    fn n_codes(&self) -> usize {
        match &self.config {
            BackboneConfig::Identity => 0,
            BackboneConfig::Uniform(_) => self.n_values(),
            BackboneConfig::Vq(v) => (self.n_values() - vq_tail_len(self.n_values(), v)) / v.dim,
        }
    }

    fn expected_payload_len(&self) -> usize {
        match &self.config {
            BackboneConfig::Identity => self.n_values() * 4,
            c => packing::packed_len(self.n_codes(), c.code_bits()),
        }
    }

    fn check_layout(&self) -> Result<()> {
        if self.payload.len() != self.expected_payload_len() {
            return Err(Error::Format(format!(
                "payload holds {} bytes, expected {}",
                self.payload.len(),
                self.expected_payload_len()
            )));
        }
        let groups = self.n_groups();
        let zeros = if self.scheme() == Scheme::Uniform {
            groups
        } else {
            0
        };
        if self.scales.len() != groups || self.zero_points.len() != zeros {
            return Err(Error::Format(format!(
                "{} scales / {} zero points for {groups} groups",
                self.scales.len(),
                self.zero_points.len()
            )));
        }
        let want_tail = match &self.config {
            BackboneConfig::Vq(v) => vq_tail_len(self.n_values(), v),
            _ => 0,
        };
        match (&self.tail, want_tail) {
            (None, 0) => Ok(()),
            (Some(t), n) if n > 0 && t.payload.len() == packing::packed_len(n, vq::TAIL_BITS) => {
                Ok(())
            }
            _ => Err(Error::Format("tail codes do not match block shape".into())),
        }
    }

    /// Exact number of stored bits: codes, scales, zero points and tail.
    pub fn stored_bits(&self) -> u64 {
        match &self.config {
            BackboneConfig::Identity => (self.n_values() * bits::UNCOMPRESSED_BITS) as u64,
            c => {
                let mut b = (self.n_codes() * c.code_bits() as usize) as u64;
                b += ((self.scales.len() + self.zero_points.len()) * bits::SCALE_BITS) as u64;
                if self.tail.is_some() {
                    let t = vq_tail_len(
                        self.n_values(),
                        match c {
                            BackboneConfig::Vq(v) => v,
                            _ => unreachable!(),
                        },
                    );
                    b += (t * vq::TAIL_BITS as usize + 2 * bits::SCALE_BITS) as u64;
                }
                b
            }
        }
    }

    /// Serializes as
    /// `{scheme u8, bits u8, rows u32, cols u32, group_size u32, n_groups u32}`,
    /// scales, zero points (uniform only), packed codes, then the VQ tail
    /// (`scale`, `zero`, 4-bit codes) when present. Little-endian throughout.
    pub fn write_to(&self, out: &mut Vec<u8>) -> Result<()> {
        out.push(self.scheme() as u8);
        out.push(self.config.code_bits());
        wire::put_u32(out, wire::u32_len(self.rows, "rows")?);
        wire::put_u32(out, wire::u32_len(self.cols, "cols")?);
        wire::put_u32(out, wire::u32_len(self.config.group_size(), "group_size")?);
        wire::put_u32(out, wire::u32_len(self.n_groups(), "n_groups")?);
        for s in self.scales.iter().chain(&self.zero_points) {
            wire::put_u16(out, s.to_bits());
        }
        out.extend_from_slice(&self.payload);
        if let Some(t) = &self.tail {
            wire::put_u16(out, t.scale.to_bits());
            wire::put_u16(out, t.zero.to_bits());
            out.extend_from_slice(&t.payload);
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.write_to(&mut out)?;
        Ok(out)
    }

    /// Reads a block written by [`QuantizedBlock::write_to`]. The header does
    /// not carry codebook or axis parameters, so the expected config is supplied.
    pub fn read_from(r: &mut Reader<'_>, config: &BackboneConfig) -> Result<Self> {
        let scheme = Scheme::from_u8(r.u8()?)?;
        let code_bits = r.u8()?;
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let group_size = r.u32()? as usize;
        let groups = r.u32()? as usize;
        if scheme != config.scheme()
            || code_bits != config.code_bits()
            || group_size != config.group_size()
        {
            return Err(Error::Format(format!(
                "block header ({scheme:?}, {code_bits} bits, gs {group_size}) does not match {}",
                config.label()
            )));
        }
        let mut qb = QuantizedBlock {
            config: *config,
            rows,
            cols,
            scales: Vec::new(),
            zero_points: Vec::new(),
            payload: Vec::new(),
            tail: None,
        };
        if groups != qb.n_groups() {
            return Err(Error::Format(format!(
                "header claims {groups} groups, shape implies {}",
                qb.n_groups()
            )));
        }
        let read_f16s = |r: &mut Reader<'_>, n: usize| -> Result<Vec<f16>> {
            (0..n).map(|_| r.u16().map(f16::from_bits)).collect()
        };
        qb.scales = read_f16s(r, groups)?;
        if scheme == Scheme::Uniform {
            qb.zero_points = read_f16s(r, groups)?;
        }
        qb.payload = r.bytes(qb.expected_payload_len())?.to_vec();
        if let BackboneConfig::Vq(v) = config {
            let t = vq_tail_len(qb.n_values(), v);
            if t > 0 {
                let scale = f16::from_bits(r.u16()?);
                let zero = f16::from_bits(r.u16()?);
                let payload = r.bytes(packing::packed_len(t, vq::TAIL_BITS))?.to_vec();
                qb.tail = Some(TailCodes {
                    scale,
                    zero,
                    payload,
                });
            }
        }
        Ok(qb)
    }

    pub fn from_bytes(bytes: &[u8], config: &BackboneConfig) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let qb = Self::read_from(&mut r, config)?;
        r.expect_end()?;
        Ok(qb)
    }
}

/// Convenience: `Q⁻¹(Q(x))`.
pub fn round_trip(x: &Matrix, cfg: &BackboneConfig) -> Result<Matrix> {
    dequantize(&quantize(x, cfg)?)
}
