//! Storage accounting: bits per cached value and total footprint.

use serde::{Deserialize, Serialize};

use super::BackboneConfig;
use crate::error::{config_err, Result};

/// Width of stored scales and zero points.
pub const SCALE_BITS: usize = 16;
/// Width of uncompressed cache entries (sinks, recent buffer, 16-bit baseline).
pub const UNCOMPRESSED_BITS: usize = 16;
/// Width of stored predictor parameters.
pub const PREDICTOR_BITS: usize = 32;

/// Everything besides the backbone codes that occupies cache memory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverheadSpec {
    pub layers: usize,
    pub tokens: usize,
    /// `kv_heads × head_dim`.
    pub kv_channels: usize,
    #[serde(default)]
    pub sink_tokens: usize,
    #[serde(default)]
    pub buffer_tokens: usize,
    /// Quantizer for layer 0; `None` uses the main backbone.
    #[serde(default)]
    pub first_layer: Option<BackboneConfig>,
    #[serde(default)]
    pub predictor_params: u64,
}

impl OverheadSpec {
    pub fn plain(layers: usize, tokens: usize, kv_channels: usize) -> Self {
        Self {
            layers,
            tokens,
            kv_channels,
            sink_tokens: 0,
            buffer_tokens: 0,
            first_layer: None,
            predictor_params: 0,
        }
    }

    pub fn total_values(&self) -> u64 {
        2 * self.layers as u64 * self.tokens as u64 * self.kv_channels as u64
    }
}

/// Breakdown of stored bits. All `*_bits` fields are totals over the cache.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BitsBreakdown {
    pub backbone_bits_per_value: f64,
    pub total_values: u64,
    pub code_bits: f64,
    pub first_layer_bits: f64,
    pub sink_bits: f64,
    pub buffer_bits: f64,
    pub predictor_bits: f64,
    pub total_bits: f64,
    pub bits_per_value: f64,
    /// Same as `bits_per_value` but leaving predictor parameters out.
    pub cache_bits_per_value: f64,
    pub total_bytes: f64,
    /// Decimal gigabytes (1e9 bytes).
    pub gigabytes: f64,
}

/// Total stored bits divided by the number of cached values
/// (`2 × layers × tokens × kv_channels`).
pub fn effective_bits(cfg: &BackboneConfig, o: &OverheadSpec) -> Result<BitsBreakdown> {
    if o.tokens == 0 {
        return config_err("effective bits need at least one token");
    }
    if o.layers == 0 || o.kv_channels == 0 {
        return config_err("effective bits need at least one layer and channel");
    }
    let total_values = o.total_values();
    let exact = (o.sink_tokens + o.buffer_tokens).min(o.tokens);
    let compressed = (o.tokens - exact) as f64 * o.kv_channels as f64 * 2.0;
    let exact_vals = exact as f64 * o.kv_channels as f64 * 2.0;

    let bpv = cfg.bits_per_value();
    let first_bpv = o
        .first_layer
        .as_ref()
        .map_or(bpv, BackboneConfig::bits_per_value);
    let code_bits = compressed * bpv * (o.layers - 1) as f64;
    let first_layer_bits = compressed * first_bpv;
    let sinks = o.sink_tokens.min(o.tokens) as f64;
    let sink_share = if exact > 0 { sinks / exact as f64 } else { 0.0 };
    let uncompressed = exact_vals * UNCOMPRESSED_BITS as f64 * o.layers as f64;
    let sink_bits = uncompressed * sink_share;
    let buffer_bits = uncompressed - sink_bits;
    let predictor_bits = o.predictor_params as f64 * PREDICTOR_BITS as f64;

    let cache_bits = code_bits + first_layer_bits + sink_bits + buffer_bits;
    let total_bits = cache_bits + predictor_bits;
    Ok(BitsBreakdown {
        backbone_bits_per_value: bpv,
        total_values,
        code_bits,
        first_layer_bits,
        sink_bits,
        buffer_bits,
        predictor_bits,
        total_bits,
        bits_per_value: total_bits / total_values as f64,
        cache_bits_per_value: cache_bits / total_values as f64,
        total_bytes: total_bits / 8.0,
        gigabytes: total_bits / 8.0 / 1e9,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantizer::{UniformConfig, VqConfig};

    #[test]
    fn per_value_rates() {
        let u2 = BackboneConfig::Uniform(UniformConfig::new(2));
        assert_eq!(u2.bits_per_value(), 2.5);
        let v2 = BackboneConfig::Vq(VqConfig::preset(2).unwrap());
        assert!((v2.bits_per_value() - (2.0 + 16.0 / 1024.0)).abs() < 1e-12);
        assert_eq!(
            BackboneConfig::Vq(VqConfig::preset_d4()).bits_per_value(),
            v2.bits_per_value()
        );
        assert_eq!(
            BackboneConfig::Vq(VqConfig::preset(4).unwrap()).bits_per_value(),
            4.015625
        );
    }

    #[test]
    fn sixteen_bit_llama_3b_footprint() {
        let o = OverheadSpec::plain(28, 131072, 8 * 128);
        let b = effective_bits(&BackboneConfig::Identity, &o).unwrap();
        assert_eq!(b.bits_per_value, 16.0);
        assert!((b.gigabytes - 15.032385536).abs() < 1e-9);
    }

    #[test]
    fn overheads_add_up() {
        let v2 = BackboneConfig::Vq(VqConfig::preset(2).unwrap());
        let o = OverheadSpec {
            layers: 4,
            tokens: 100,
            kv_channels: 8,
            sink_tokens: 4,
            buffer_tokens: 6,
            first_layer: Some(BackboneConfig::Uniform(UniformConfig::new(4))),
            predictor_params: 1000,
        };
        let b = effective_bits(&v2, &o).unwrap();
        let per_role_layer = 90.0 * 8.0 * 2.0;
        assert!((b.code_bits - 3.0 * per_role_layer * v2.bits_per_value()).abs() < 1e-6);
        assert!((b.first_layer_bits - per_role_layer * 4.5).abs() < 1e-6);
        assert!((b.sink_bits - 4.0 * 16.0 * 16.0 * 4.0).abs() < 1e-6);
        assert!((b.buffer_bits - 6.0 * 16.0 * 16.0 * 4.0).abs() < 1e-6);
        assert_eq!(b.predictor_bits, 32000.0);
        let sum = b.code_bits + b.first_layer_bits + b.sink_bits + b.buffer_bits + b.predictor_bits;
        assert!((b.total_bits - sum).abs() < 1e-6);
        assert!(b.bits_per_value > b.cache_bits_per_value);
    }

    #[test]
    fn zero_tokens_is_an_error() {
        let o = OverheadSpec::plain(2, 0, 8);
        assert!(effective_bits(&BackboneConfig::Identity, &o).is_err());
    }
}
