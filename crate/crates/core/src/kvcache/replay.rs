//! Streams a trace through per-sequence caches and scores the reconstruction.

use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{convert_keys, CacheConfig, CompressedKVCache, Recon};
use crate::error::{config_err, Result};
use crate::linalg::{evr_from_variances, EvrAggregation, Matrix};
use crate::predictor::{Geometry, PredictorSet};
use crate::quantizer::{effective_bits, BitsBreakdown, OverheadSpec};
use crate::report::{ErrorStats, ErrorSummary, Timing, SCHEMA_VERSION};
use crate::trace_io::KVTrace;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReplayConfig {
    pub cache: CacheConfig,
    /// Tokens per append call.
    pub chunk_tokens: usize,
    pub aggregation: EvrAggregation,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        Self {
            cache: CacheConfig::default(),
            chunk_tokens: 128,
            aggregation: EvrAggregation::Pooled,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerReplay {
    pub layer: usize,
    pub keys: Option<ErrorSummary>,
    pub values: Option<ErrorSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PooledReplay {
    pub key_evr: Option<f64>,
    pub value_evr: Option<f64>,
    pub evr: Option<f64>,
    pub key_mse: f64,
    pub value_mse: f64,
    pub mse: f64,
    pub max_abs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub schema_version: u32,
    pub kind: String,
    pub config: ReplayConfig,
    pub backbone: String,
    /// `false` for the no-predictor baseline.
    pub with_predictors: bool,
    pub sequences: usize,
    pub tokens: usize,
    pub flushes: usize,
    pub layers: Vec<LayerReplay>,
    pub pooled: PooledReplay,
    /// Accounting formula with every overhead (sinks, buffer, first layer, predictors).
    pub bits: BitsBreakdown,
    /// Bits actually held by the caches plus predictor parameters, per cached value.
    pub measured_bits_per_value: f64,
    /// As above without predictor parameters.
    pub measured_cache_bits_per_value: f64,
    #[serde(default)]
    pub notes: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timing: Option<Timing>,
}

impl ReplayReport {
    /// Mean over layers `first..` of this report's total MSE divided by `baseline`'s.
    pub fn mean_error_ratio(&self, baseline: &ReplayReport, first: usize) -> Option<f64> {
        let ratios: Vec<f64> = self
            .layers
            .iter()
            .zip(&baseline.layers)
            .skip(first)
            .filter_map(|(a, b)| {
                let num = a.keys.as_ref()?.mse + a.values.as_ref()?.mse;
                let den = b.keys.as_ref()?.mse + b.values.as_ref()?.mse;
                (den > 0.0).then(|| num / den)
            })
            .collect();
        (!ratios.is_empty()).then(|| ratios.iter().sum::<f64>() / ratios.len() as f64)
    }
}

fn check_inputs(
    trace: &KVTrace,
    predictors: Option<&PredictorSet>,
    cfg: &ReplayConfig,
) -> Result<()> {
    cfg.cache.validate()?;
    if cfg.chunk_tokens == 0 {
        return config_err("chunk_tokens must be at least 1");
    }
    if let Some(p) = predictors {
        p.check_compatible(&trace.meta, cfg.cache.rope_mode)?;
    }
    Ok(())
}

/// Keys (in the cache's rotary mode) and values of one sequence, per layer.
fn sequence_layers(
    trace: &KVTrace,
    seq: usize,
    cfg: &CacheConfig,
) -> Result<(Vec<Matrix>, Vec<Matrix>)> {
    let range = trace
        .meta
        .sequence_ranges()
        .get(seq)
        .cloned()
        .ok_or_else(|| crate::Error::Config(format!("sequence {seq} out of range")))?;
    let positions: Vec<usize> = (0..range.len()).collect();
    let mut keys = Vec::with_capacity(trace.meta.n_layers);
    let mut values = Vec::with_capacity(trace.meta.n_layers);
    for (k, v) in trace.keys.iter().zip(&trace.values) {
        let k = k.slice_rows(range.start, range.end);
        keys.push(convert_keys(&k, &trace.meta, &positions, cfg.rope_mode)?.unwrap_or(k));
        values.push(v.slice_rows(range.start, range.end));
    }
    Ok((keys, values))
}

fn fill_cache(
    trace: &KVTrace,
    keys: &[Matrix],
    values: &[Matrix],
    predictors: Option<Arc<PredictorSet>>,
    cfg: &ReplayConfig,
) -> Result<CompressedKVCache> {
    let mut cache = CompressedKVCache::new(
        Geometry::of_trace(&trace.meta),
        cfg.cache.clone(),
        predictors,
    )?;
    let len = keys[0].rows();
    let mut start = 0;
    while start < len {
        let end = (start + cfg.chunk_tokens).min(len);
        let kc: Vec<Matrix> = keys.iter().map(|m| m.slice_rows(start, end)).collect();
        let vc: Vec<Matrix> = values.iter().map(|m| m.slice_rows(start, end)).collect();
        cache.append(&kc, &vc)?;
        start = end;
    }
    cache.finish()?;
    Ok(cache)
}

/// The cache holding sequence `seq` after streaming it in chunks.
pub fn encode_sequence(
    trace: &KVTrace,
    seq: usize,
    predictors: Option<Arc<PredictorSet>>,
    cfg: &ReplayConfig,
) -> Result<CompressedKVCache> {
    check_inputs(trace, predictors.as_deref(), cfg)?;
    let (k, v) = sequence_layers(trace, seq, &cfg.cache)?;
    fill_cache(trace, &k, &v, predictors, cfg)
}

/// Reconstructed keys and values of every layer over the whole trace, keys in
/// the cache's rotary mode.
pub fn replay_reconstruct(
    trace: &KVTrace,
    predictors: Option<Arc<PredictorSet>>,
    cfg: &ReplayConfig,
) -> Result<Vec<Recon>> {
    check_inputs(trace, predictors.as_deref(), cfg)?;
    let (l, kv) = (trace.meta.n_layers, trace.kv_channels());
    let mut out: Vec<(Vec<f32>, Vec<f32>)> = vec![(Vec::new(), Vec::new()); l];
    for seq in 0..trace.meta.n_sequences {
        let (k, v) = sequence_layers(trace, seq, &cfg.cache)?;
        let cache = fill_cache(trace, &k, &v, predictors.clone(), cfg)?;
        for (i, (kh, vh)) in cache.reconstruct_all()?.into_iter().enumerate() {
            out[i].0.extend_from_slice(kh.as_slice());
            out[i].1.extend_from_slice(vh.as_slice());
        }
    }
    let t = trace.meta.n_tokens;
    out.into_iter()
        .map(|(k, v)| Ok((Matrix::from_vec(t, kv, k)?, Matrix::from_vec(t, kv, v)?)))
        .collect()
}

struct SeqResult {
    keys: Vec<ErrorStats>,
    values: Vec<ErrorStats>,
    flushes: usize,
    exact_sinks: usize,
    exact_buffer: usize,
    cache_bits: u64,
    encode_s: f64,
    decode_s: f64,
}

fn replay_sequence(
    trace: &KVTrace,
    seq: usize,
    predictors: Option<Arc<PredictorSet>>,
    cfg: &ReplayConfig,
) -> Result<SeqResult> {
    let (k, v) = sequence_layers(trace, seq, &cfg.cache)?;
    let t0 = Instant::now();
    let cache = fill_cache(trace, &k, &v, predictors, cfg)?;
    let encode_s = t0.elapsed().as_secs_f64();
    let kv = trace.kv_channels();
    let mut keys = Vec::with_capacity(k.len());
    let mut values = Vec::with_capacity(k.len());
    let mut pass = cache.reconstruction();
    let mut decode_s = 0.0;
    for i in 0..k.len() {
        let t1 = Instant::now();
        let (kh, vh) = pass.layer(i)?;
        decode_s += t1.elapsed().as_secs_f64();
        let mut ks = ErrorStats::new(kv);
        let mut vs = ErrorStats::new(kv);
        for r in 0..kh.rows() {
            ks.add_row(k[i].row(r), kh.row(r));
            vs.add_row(v[i].row(r), vh.row(r));
        }
        keys.push(ks);
        values.push(vs);
    }
    Ok(SeqResult {
        keys,
        values,
        flushes: cache.flushes(),
        exact_sinks: cache.n_sinks(),
        exact_buffer: cache.buffered(),
        cache_bits: cache.stored_bits(false),
        encode_s,
        decode_s,
    })
}

fn pooled_evr(stats: &[&ErrorStats], agg: EvrAggregation) -> Option<f64> {
    let (mut t, mut e) = (Vec::new(), Vec::new());
    for s in stats {
        let (a, b) = s.variance_parts();
        t.extend(a);
        e.extend(b);
    }
    evr_from_variances(&t, &e, agg).ok()
}

fn mean_mse(stats: &[&ErrorStats]) -> f64 {
    let sse: f64 = stats.iter().map(|s| s.sse()).sum();
    let n: f64 = stats
        .iter()
        .map(|s| s.rows() as f64 * s.variance_parts().0.len() as f64)
        .sum();
    if n > 0.0 {
        sse / n
    } else {
        0.0
    }
}

/// Replays every sequence of `trace` through its own cache and reports
/// reconstruction quality and storage. `predictors = None` runs the
/// plain-quantization baseline.
pub fn replay_trace(
    trace: &KVTrace,
    predictors: Option<Arc<PredictorSet>>,
    cfg: &ReplayConfig,
) -> Result<ReplayReport> {
    check_inputs(trace, predictors.as_deref(), cfg)?;
    let start = Instant::now();
    let results: Vec<SeqResult> = (0..trace.meta.n_sequences)
        .into_par_iter()
        .map(|s| replay_sequence(trace, s, predictors.clone(), cfg))
        .collect::<Result<_>>()?;

    let (l, kv) = (trace.meta.n_layers, trace.kv_channels());
    let mut keys: Vec<ErrorStats> = (0..l).map(|_| ErrorStats::new(kv)).collect();
    let mut values: Vec<ErrorStats> = (0..l).map(|_| ErrorStats::new(kv)).collect();
    let (mut flushes, mut sinks, mut buffer, mut cache_bits) = (0, 0, 0, 0u64);
    let (mut enc_s, mut dec_s) = (0.0, 0.0);
    for r in &results {
        for i in 0..l {
            keys[i].merge(&r.keys[i]);
            values[i].merge(&r.values[i]);
        }
        flushes += r.flushes;
        sinks += r.exact_sinks;
        buffer += r.exact_buffer;
        cache_bits += r.cache_bits;
        enc_s += r.encode_s;
        dec_s += r.decode_s;
    }

    let agg = cfg.aggregation;
    let layers = (0..l)
        .map(|i| LayerReplay {
            layer: i,
            keys: keys[i].summary(agg),
            values: values[i].summary(agg),
        })
        .collect();
    let kr: Vec<&ErrorStats> = keys.iter().collect();
    let vr: Vec<&ErrorStats> = values.iter().collect();
    let all: Vec<&ErrorStats> = keys.iter().chain(&values).collect();
    let pooled = PooledReplay {
        key_evr: pooled_evr(&kr, agg),
        value_evr: pooled_evr(&vr, agg),
        evr: pooled_evr(&all, agg),
        key_mse: mean_mse(&kr),
        value_mse: mean_mse(&vr),
        mse: mean_mse(&all),
        max_abs: all.iter().map(|s| s.max_abs()).fold(0.0, f64::max),
    };

    let predictor_params = predictors.as_ref().map_or(0, |p| p.n_params());
    let overhead = OverheadSpec {
        layers: l,
        tokens: trace.meta.n_tokens,
        kv_channels: kv,
        sink_tokens: sinks,
        buffer_tokens: buffer,
        first_layer: Some(cfg.cache.first_layer_backbone()?),
        predictor_params,
    };
    let bits = effective_bits(&cfg.cache.backbone, &overhead)?;
    let total_values = overhead.total_values() as f64;
    let predictor_bits = predictor_params as f64 * crate::quantizer::bits::PREDICTOR_BITS as f64;

    let mut notes = Vec::new();
    if predictors.is_none() {
        notes.push("no predictors: plain backbone quantization baseline".to_string());
    }
    let n_values = total_values;
    Ok(ReplayReport {
        schema_version: SCHEMA_VERSION,
        kind: "replay".into(),
        config: cfg.clone(),
        backbone: cfg.cache.backbone.label(),
        with_predictors: predictors.is_some(),
        sequences: trace.meta.n_sequences,
        tokens: trace.meta.n_tokens,
        flushes,
        layers,
        pooled,
        bits,
        measured_bits_per_value: (cache_bits as f64 + predictor_bits) / total_values,
        measured_cache_bits_per_value: cache_bits as f64 / total_values,
        notes,
        timing: Some(Timing {
            seconds: start.elapsed().as_secs_f64(),
            encode_values_per_second: (enc_s > 0.0).then(|| n_values / enc_s),
            decode_values_per_second: (dec_s > 0.0).then(|| n_values / dec_s),
        }),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantizer::{BackboneConfig, UniformConfig};
    use crate::trace_io::{synth_trace, SynthConfig};

    fn small_trace() -> KVTrace {
        synth_trace(&SynthConfig {
            n_layers: 3,
            n_kv_heads: 2,
            head_dim: 8,
            hidden_dim: 64,
            tokens: 120,
            sequences: 2,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn identity_replay_is_exact() {
        let trace = small_trace();
        let cfg = ReplayConfig {
            cache: CacheConfig {
                first_layer_bits: None,
                buffer_tokens: 16,
                ..CacheConfig::with_backbone(BackboneConfig::Identity)
            },
            chunk_tokens: 7,
            ..ReplayConfig::default()
        };
        let r = replay_trace(&trace, None, &cfg).unwrap();
        assert_eq!(r.pooled.evr, Some(1.0));
        assert_eq!(r.pooled.mse, 0.0);
        assert_eq!(r.bits.bits_per_value, 16.0);
        assert_eq!(r.measured_bits_per_value, 16.0);
        assert!(r.notes[0].contains("baseline"));
    }

    #[test]
    fn chunking_does_not_change_the_cache() {
        let trace = small_trace();
        let mut cfg = ReplayConfig {
            cache: CacheConfig {
                buffer_tokens: 16,
                ..CacheConfig::with_backbone(BackboneConfig::Uniform(UniformConfig::new(2)))
            },
            ..ReplayConfig::default()
        };
        let mut bytes = Vec::new();
        for chunk in [1, 5, 16, 48] {
            cfg.chunk_tokens = chunk;
            bytes.push(
                encode_sequence(&trace, 1, None, &cfg)
                    .unwrap()
                    .to_bytes()
                    .unwrap(),
            );
        }
        assert!(bytes.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn measured_bits_match_formula_for_aligned_groups() {
        let trace = small_trace();
        let cfg = ReplayConfig {
            cache: CacheConfig {
                sink_tokens: 4,
                buffer_tokens: 16,
                ..CacheConfig::with_backbone(BackboneConfig::Uniform(UniformConfig::new(2)))
            },
            ..ReplayConfig::default()
        };
        let r = replay_trace(&trace, None, &cfg).unwrap();
        assert!((r.measured_cache_bits_per_value - r.bits.cache_bits_per_value).abs() < 1e-12);
    }
}
