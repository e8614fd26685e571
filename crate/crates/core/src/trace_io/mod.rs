//! KV traces: the `KVT1` container, rotary embeddings and a synthetic generator.
//!
//! Layout (little-endian): magic `KVT1`, version `u16`, `u32` length of a JSON
//! [`TraceMeta`] header, the header, then for each layer the keys and values
//! as row-major `f32` of shape `[n_tokens × kv_channels]`, then (if present)
//! one `f32` attention score per token for every layer, then an xxh64 of all
//! preceding bytes.

pub mod rope;
pub mod synth;

use std::fs::File;
use std::io::{BufReader, Read, Seek, SeekFrom, Write};
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};
use xxhash_rust::xxh64::Xxh64;

use crate::error::{config_err, shape_err, Error, Result};
use crate::linalg::Matrix;
use crate::wire::{self, Reader};

pub use rope::{apply_rope, inverse_rope};
pub use synth::{synth_trace, SynthConfig};

pub const TRACE_MAGIC: &[u8; 4] = b"KVT1";
pub const TRACE_VERSION: u16 = 1;

/// Whether stored keys have had rotary embeddings applied.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RopeMode {
    #[default]
    PreRope,
    PostRope,
}

fn default_theta() -> f64 {
    10000.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceMeta {
    pub n_layers: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    pub n_tokens: usize,
    pub n_sequences: usize,
    pub sequence_lengths: Vec<usize>,
    #[serde(default)]
    pub rope_mode: RopeMode,
    #[serde(default = "default_theta")]
    pub rope_theta: f64,
    #[serde(default)]
    pub has_attention_stats: bool,
    #[serde(default)]
    pub source: String,
}

impl TraceMeta {
    pub fn new(
        n_layers: usize,
        n_kv_heads: usize,
        head_dim: usize,
        sequence_lengths: Vec<usize>,
    ) -> Self {
        Self {
            n_layers,
            n_kv_heads,
            head_dim,
            n_tokens: sequence_lengths.iter().sum(),
            n_sequences: sequence_lengths.len(),
            sequence_lengths,
            rope_mode: RopeMode::PreRope,
            rope_theta: default_theta(),
            has_attention_stats: false,
            source: String::new(),
        }
    }

    pub fn kv_channels(&self) -> usize {
        self.n_kv_heads * self.head_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.n_kv_heads == 0 || self.head_dim == 0 {
            return Err(Error::Format("trace dimensions must be >= 1".into()));
        }
        if self.sequence_lengths.len() != self.n_sequences {
            return Err(Error::Format(format!(
                "n_sequences = {} but {} sequence lengths listed",
                self.n_sequences,
                self.sequence_lengths.len()
            )));
        }
        let sum: usize = self.sequence_lengths.iter().sum();
        if sum != self.n_tokens || self.n_tokens == 0 {
            return Err(Error::Format(format!(
                "sequence lengths sum to {sum}, header says {} tokens",
                self.n_tokens
            )));
        }
        if !(self.rope_theta > 0.0) {
            return Err(Error::Format("rope_theta must be positive".into()));
        }
        Ok(())
    }

    /// Token range of every sequence in the flattened token axis.
    pub fn sequence_ranges(&self) -> Vec<Range<usize>> {
        let mut start = 0;
        self.sequence_lengths
            .iter()
            .map(|&len| {
                let r = start..start + len;
                start += len;
                r
            })
            .collect()
    }

    /// Position of every token inside its own sequence.
    pub fn positions(&self) -> Vec<usize> {
        self.sequence_lengths
            .iter()
            .flat_map(|&len| 0..len)
            .collect()
    }

    fn layer_bytes(&self) -> u64 {
        2 * self.n_tokens as u64 * self.kv_channels() as u64 * 4
    }
}

/// Accumulated attention received by every token, per layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionStats {
    pub scores: Vec<Vec<f32>>,
}

impl AttentionStats {
    pub fn n_tokens(&self) -> usize {
        self.scores.first().map_or(0, Vec::len)
    }

    pub fn validate(&self, n_layers: usize, n_tokens: usize) -> Result<()> {
        if self.scores.len() != n_layers || self.scores.iter().any(|s| s.len() != n_tokens) {
            return shape_err("attention stats do not match trace geometry");
        }
        for (l, s) in self.scores.iter().enumerate() {
            if let Some(i) = s.iter().position(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::Format(format!(
                    "attention score {i} of layer {l} is negative or not finite"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KVTrace {
    pub meta: TraceMeta,
    pub keys: Vec<Matrix>,
    pub values: Vec<Matrix>,
    pub stats: Option<AttentionStats>,
}

impl KVTrace {
    pub fn new(
        mut meta: TraceMeta,
        keys: Vec<Matrix>,
        values: Vec<Matrix>,
        stats: Option<AttentionStats>,
    ) -> Result<Self> {
        meta.has_attention_stats = stats.is_some();
        let t = Self {
            meta,
            keys,
            values,
            stats,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        self.meta.validate()?;
        let m = &self.meta;
        if self.keys.len() != m.n_layers || self.values.len() != m.n_layers {
            return shape_err(format!(
                "trace has {} key and {} value layers, header says {}",
                self.keys.len(),
                self.values.len(),
                m.n_layers
            ));
        }
        let shape = (m.n_tokens, m.kv_channels());
        for (l, (k, v)) in self.keys.iter().zip(&self.values).enumerate() {
            if k.shape() != shape || v.shape() != shape {
                return shape_err(format!("layer {l} is not {}x{}", shape.0, shape.1));
            }
            k.ensure_finite()?;
            v.ensure_finite()?;
        }
        if m.has_attention_stats != self.stats.is_some() {
            return Err(Error::Format(
                "attention stats flag does not match payload".into(),
            ));
        }
        if let Some(s) = &self.stats {
            s.validate(m.n_layers, m.n_tokens)?;
        }
        Ok(())
    }

    pub fn kv_channels(&self) -> usize {
        self.meta.kv_channels()
    }

    fn layer_copy(&self, layer: usize) -> Result<(Matrix, Matrix)> {
        if layer >= self.meta.n_layers {
            return shape_err(format!("layer {layer} out of range"));
        }
        Ok((self.keys[layer].clone(), self.values[layer].clone()))
    }

    /// Sub-trace made of the listed sequences, in the given order.
    pub fn select_sequences(&self, seqs: &[usize]) -> Result<KVTrace> {
        let ranges = self.meta.sequence_ranges();
        let mut rows = Vec::new();
        let mut lengths = Vec::new();
        for &s in seqs {
            let r = ranges.get(s).ok_or_else(|| {
                Error::Config(format!(
                    "sequence {s} out of range ({} sequences)",
                    ranges.len()
                ))
            })?;
            rows.extend(r.clone());
            lengths.push(r.len());
        }
        self.select_tokens(&rows, lengths)
    }

    /// Sub-trace made of the given token rows, regrouped into sequences of
    /// `lengths`.
    pub fn select_tokens(&self, rows: &[usize], lengths: Vec<usize>) -> Result<KVTrace> {
        if lengths.iter().sum::<usize>() != rows.len() {
            return config_err("sequence lengths do not cover the selected rows");
        }
        let mut meta = self.meta.clone();
        meta.n_tokens = rows.len();
        meta.n_sequences = lengths.len();
        meta.sequence_lengths = lengths;
        let stats = self.stats.as_ref().map(|s| AttentionStats {
            scores: s
                .scores
                .iter()
                .map(|l| rows.iter().map(|&r| l[r]).collect())
                .collect(),
        });
        Ok(KVTrace {
            meta,
            keys: self.keys.iter().map(|k| k.gather_rows(rows)).collect(),
            values: self.values.iter().map(|v| v.gather_rows(rows)).collect(),
            stats,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut out = header_bytes(&self.meta)?;
        out.reserve(self.meta.layer_bytes() as usize * self.meta.n_layers + 8);
        for (k, v) in self.keys.iter().zip(&self.values) {
            wire::put_f32s(&mut out, k.as_slice());
            wire::put_f32s(&mut out, v.as_slice());
        }
        if let Some(s) = &self.stats {
            for l in &s.scores {
                wire::put_f32s(&mut out, l);
            }
        }
        let sum = wire::checksum(&out);
        wire::put_u64(&mut out, sum);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<KVTrace> {
        let (meta, header_len) = parse_header(bytes)?;
        check_length(&meta, header_len as u64, bytes.len() as u64)?;
        let body = wire::split_checksum(bytes)?;
        let mut r = Reader::new(&body[header_len..]);
        let n = meta.n_tokens;
        let c = meta.kv_channels();
        let mut keys = Vec::with_capacity(meta.n_layers);
        let mut values = Vec::with_capacity(meta.n_layers);
        for l in 0..meta.n_layers {
            keys.push(layer_matrix(r.f32s(n * c)?, n, c, l, "keys")?);
            values.push(layer_matrix(r.f32s(n * c)?, n, c, l, "values")?);
        }
        let stats = if meta.has_attention_stats {
            let mut scores = Vec::with_capacity(meta.n_layers);
            for _ in 0..meta.n_layers {
                scores.push(r.f32s(n)?);
            }
            Some(AttentionStats { scores })
        } else {
            None
        };
        r.expect_end()?;
        let t = KVTrace {
            meta,
            keys,
            values,
            stats,
        };
        t.validate()?;
        Ok(t)
    }
}

fn layer_matrix(data: Vec<f32>, n: usize, c: usize, layer: usize, role: &str) -> Result<Matrix> {
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::Format(format!(
            "non-finite value in layer {layer} {role} at row {}, channel {}",
            i / c.max(1),
            i % c.max(1)
        )));
    }
    Matrix::from_vec(n, c, data)
}

fn header_bytes(meta: &TraceMeta) -> Result<Vec<u8>> {
    meta.validate()?;
    let json = serde_json::to_vec(meta)?;
    let mut out = Vec::with_capacity(10 + json.len());
    out.extend_from_slice(TRACE_MAGIC);
    wire::put_u16(&mut out, TRACE_VERSION);
    wire::put_u32(&mut out, wire::u32_len(json.len(), "trace header length")?);
    out.extend_from_slice(&json);
    Ok(out)
}

/// Parses magic, version and JSON header; returns the header and the offset
/// of the first layer payload.
fn parse_header(bytes: &[u8]) -> Result<(TraceMeta, usize)> {
    let mut r = Reader::new(bytes);
    let magic = r.bytes(4)?;
    if magic != TRACE_MAGIC {
        return Err(Error::Format(format!(
            "bad magic {magic:?}, expected \"KVT1\""
        )));
    }
    let version = r.u16()?;
    if version != TRACE_VERSION {
        return Err(Error::Format(format!(
            "unsupported trace version {version}"
        )));
    }
    let len = r.u32()? as usize;
    let meta: TraceMeta = serde_json::from_slice(r.bytes(len)?)
        .map_err(|e| Error::Format(format!("trace header: {e}")))?;
    meta.validate()?;
    Ok((meta, r.position()))
}

fn stats_bytes(meta: &TraceMeta) -> u64 {
    if meta.has_attention_stats {
        meta.n_layers as u64 * meta.n_tokens as u64 * 4
    } else {
        0
    }
}

/// Names the first layer whose payload does not fit in `file_len` bytes.
fn check_length(meta: &TraceMeta, header_len: u64, file_len: u64) -> Result<()> {
    let layer = meta.layer_bytes();
    let expected = header_len + layer * meta.n_layers as u64 + stats_bytes(meta) + 8;
    if file_len >= expected {
        if file_len > expected {
            return Err(Error::Format(format!(
                "{} trailing bytes after trace payload",
                file_len - expected
            )));
        }
        return Ok(());
    }
    let avail = file_len.saturating_sub(header_len);
    let complete = (avail / layer) as usize;
    if complete < meta.n_layers {
        return Err(Error::Truncated { layer: complete });
    }
    Err(Error::Format(
        "truncated attention stats or checksum".into(),
    ))
}

pub fn write_trace(trace: &KVTrace, path: impl AsRef<Path>) -> Result<()> {
    let bytes = trace.to_bytes()?;
    let mut f = File::create(path)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    Ok(())
}

pub fn read_trace(path: impl AsRef<Path>) -> Result<KVTrace> {
    KVTrace::from_bytes(&std::fs::read(path)?)
}

/// Anything that can hand out the ground-truth keys and values of one layer
/// at a time.
pub trait LayerSource {
    fn meta(&self) -> &TraceMeta;
    /// `(keys, values)` of `layer`, each `[n_tokens × kv_channels]`.
    fn layer(&mut self, layer: usize) -> Result<(Matrix, Matrix)>;
}

impl LayerSource for KVTrace {
    fn meta(&self) -> &TraceMeta {
        &self.meta
    }

    fn layer(&mut self, layer: usize) -> Result<(Matrix, Matrix)> {
        self.layer_copy(layer)
    }
}

impl LayerSource for &KVTrace {
    fn meta(&self) -> &TraceMeta {
        &self.meta
    }

    fn layer(&mut self, layer: usize) -> Result<(Matrix, Matrix)> {
        self.layer_copy(layer)
    }
}

/// Reads a `KVT1` file one layer at a time.
///
/// Opening checks the header and file length; [`TraceReader::verify`] streams
/// the whole file through the checksum.
pub struct TraceReader {
    file: BufReader<File>,
    meta: TraceMeta,
    header_len: u64,
}

impl TraceReader {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let mut file = File::open(path)?;
        let file_len = file.metadata()?.len();
        let mut fixed = [0u8; 10];
        file.read_exact(&mut fixed)
            .map_err(|_| Error::Format("file too short for header".into()))?;
        let json_len = u32::from_le_bytes(fixed[6..10].try_into().unwrap()) as usize;
        let mut head = fixed.to_vec();
        head.resize(10 + json_len, 0);
        file.read_exact(&mut head[10..])
            .map_err(|_| Error::Format("file too short for header".into()))?;
        let (meta, header_len) = parse_header(&head)?;
        check_length(&meta, header_len as u64, file_len)?;
        Ok(Self {
            file: BufReader::new(file),
            meta,
            header_len: header_len as u64,
        })
    }

    pub fn meta(&self) -> &TraceMeta {
        &self.meta
    }

    fn read_f32s(&mut self, offset: u64, n: usize) -> Result<Vec<f32>> {
        self.file.seek(SeekFrom::Start(offset))?;
        let mut raw = vec![0u8; n * 4];
        self.file.read_exact(&mut raw)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn read_layer(&mut self, layer: usize) -> Result<(Matrix, Matrix)> {
        if layer >= self.meta.n_layers {
            return shape_err(format!("layer {layer} out of range"));
        }
        let n = self.meta.n_tokens;
        let c = self.meta.kv_channels();
        let off = self.header_len + layer as u64 * self.meta.layer_bytes();
        let k = self.read_f32s(off, n * c)?;
        let v = self.read_f32s(off + (n * c * 4) as u64, n * c)?;
        Ok((
            layer_matrix(k, n, c, layer, "keys")?,
            layer_matrix(v, n, c, layer, "values")?,
        ))
    }

    pub fn read_stats(&mut self) -> Result<Option<AttentionStats>> {
        if !self.meta.has_attention_stats {
            return Ok(None);
        }
        let n = self.meta.n_tokens;
        let off = self.header_len + self.meta.n_layers as u64 * self.meta.layer_bytes();
        let scores = (0..self.meta.n_layers)
            .map(|l| self.read_f32s(off + (l * n * 4) as u64, n))
            .collect::<Result<Vec<_>>>()?;
        let s = AttentionStats { scores };
        s.validate(self.meta.n_layers, n)?;
        Ok(Some(s))
    }

    /// Streams the file through the checksum without holding it in memory.
    pub fn verify(&mut self) -> Result<()> {
        let file = self.file.get_mut();
        let len = file.metadata()?.len();
        file.seek(SeekFrom::Start(0))?;
        let mut hasher = Xxh64::new(0);
        let mut remaining = len - 8;
        let mut buf = vec![0u8; 1 << 20];
        while remaining > 0 {
            let take = remaining.min(buf.len() as u64) as usize;
            file.read_exact(&mut buf[..take])?;
            hasher.update(&buf[..take]);
            remaining -= take as u64;
        }
        let mut tail = [0u8; 8];
        file.read_exact(&mut tail)?;
        let stored = u64::from_le_bytes(tail);
        let computed = hasher.digest();
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        Ok(())
    }
}

impl LayerSource for TraceReader {
    fn meta(&self) -> &TraceMeta {
        &self.meta
    }

    fn layer(&mut self, layer: usize) -> Result<(Matrix, Matrix)> {
        self.read_layer(layer)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> KVTrace {
        let meta = TraceMeta::new(2, 1, 4, vec![5, 3]);
        let mk = |off: f32| {
            Matrix::from_vec(8, 4, (0..32).map(|i| i as f32 * 0.5 + off).collect()).unwrap()
        };
        let stats = AttentionStats {
            scores: vec![vec![1.0; 8], vec![2.0; 8]],
        };
        KVTrace::new(
            meta,
            vec![mk(0.0), mk(1.0)],
            vec![mk(2.0), mk(3.0)],
            Some(stats),
        )
        .unwrap()
    }

    #[test]
    fn bytes_round_trip() {
        let t = small();
        let b = t.to_bytes().unwrap();
        assert_eq!(KVTrace::from_bytes(&b).unwrap(), t);
        assert_eq!(t.to_bytes().unwrap(), b);
    }

    #[test]
    fn truncation_names_the_layer() {
        let b = small().to_bytes().unwrap();
        let (_, header) = parse_header(&b).unwrap();
        let layer = 2 * 8 * 4 * 4;
        for (cut, want) in [
            (header + 10, 0),
            (header + layer + 1, 1),
            (header + layer - 1, 0),
        ] {
            match KVTrace::from_bytes(&b[..cut]) {
                Err(Error::Truncated { layer }) => assert_eq!(layer, want, "cut {cut}"),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
        assert!(matches!(
            KVTrace::from_bytes(&b[..b.len() - 3]),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn rejects_bad_magic_version_and_checksum() {
        let mut b = small().to_bytes().unwrap();
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(KVTrace::from_bytes(&bad)
            .unwrap_err()
            .to_string()
            .contains("magic"));
        let mut bad = b.clone();
        bad[4] = 9;
        assert!(KVTrace::from_bytes(&bad)
            .unwrap_err()
            .to_string()
            .contains("version"));
        let n = b.len();
        b[n - 20] ^= 1;
        assert!(matches!(
            KVTrace::from_bytes(&b),
            Err(Error::Checksum { .. })
        ));
    }

    #[test]
    fn nan_payload_is_reported() {
        let t = small();
        let mut b = t.to_bytes().unwrap();
        let (_, header) = parse_header(&b).unwrap();
        let at = header + 32 * 4 + 4 * 5;
        b[at..at + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        let n = b.len();
        let sum = wire::checksum(&b[..n - 8]);
        b[n - 8..].copy_from_slice(&sum.to_le_bytes());
        let err = KVTrace::from_bytes(&b).unwrap_err().to_string();
        assert!(
            err.contains("non-finite") && err.contains("layer 0 values"),
            "{err}"
        );
    }

    #[test]
    fn sequence_selection() {
        let t = small();
        let s = t.select_sequences(&[1]).unwrap();
        assert_eq!(s.meta.sequence_lengths, vec![3]);
        assert_eq!(s.keys[1].row(0), t.keys[1].row(5));
        assert!(t.select_sequences(&[2]).is_err());
    }

    #[test]
    fn streaming_reader_matches_whole_read() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.kvt");
        let t = small();
        write_trace(&t, &path).unwrap();
        let mut r = TraceReader::open(&path).unwrap();
        r.verify().unwrap();
        for l in [1, 0] {
            let (k, v) = r.read_layer(l).unwrap();
            assert_eq!(k, t.keys[l]);
            assert_eq!(v, t.values[l]);
        }
        assert_eq!(r.read_stats().unwrap(), t.stats);
    }
}
