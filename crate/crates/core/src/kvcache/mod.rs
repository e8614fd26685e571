//! Compressed KV cache: residual codec, streaming store, and trace replay.

mod cache;
mod replay;

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::linalg::Matrix;
use crate::predictor::{LayerPredictors, LinearPredictor};
use crate::quantizer::{quantize, BackboneConfig, QuantizedBlock, UniformConfig, VqConfig};
use crate::trace_io::rope::{apply_rope, inverse_rope};
use crate::trace_io::{RopeMode, TraceMeta};

pub use cache::{
    cache_header_json, CompressedKVCache, LayerStore, ReconstructionPass, Segment, CACHE_MAGIC,
};
pub use replay::{
    encode_sequence, replay_reconstruct, replay_trace, LayerReplay, PooledReplay, ReplayConfig,
    ReplayReport,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CacheConfig {
    pub backbone: BackboneConfig,
    /// Bit width for layer 0 in the backbone's family; `None` keeps layer 0
    /// uncompressed.
    pub first_layer_bits: Option<u8>,
    pub sink_tokens: usize,
    pub buffer_tokens: usize,
    /// Encode a short leftover buffer when a sequence ends.
    pub final_flush: bool,
    pub rope_mode: RopeMode,
}

impl Default for CacheConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::Vq(VqConfig::preset(2).expect("2-bit preset")),
            first_layer_bits: Some(4),
            sink_tokens: 4,
            buffer_tokens: 128,
            final_flush: false,
            rope_mode: RopeMode::PreRope,
        }
    }
}

impl CacheConfig {
    pub fn with_backbone(backbone: BackboneConfig) -> Self {
        Self {
            backbone,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.buffer_tokens == 0 {
            return config_err("the recent buffer must hold at least one token");
        }
        self.first_layer_backbone()?.validate()
    }

    /// Quantizer for layer 0: the backbone's family at `first_layer_bits`.
    pub fn first_layer_backbone(&self) -> Result<BackboneConfig> {
        let Some(bits) = self.first_layer_bits else {
            return Ok(BackboneConfig::Identity);
        };
        Ok(match self.backbone {
            BackboneConfig::Identity => BackboneConfig::Identity,
            BackboneConfig::Uniform(u) => BackboneConfig::Uniform(UniformConfig { bits, ..u }),
            BackboneConfig::Vq(v) => {
                let p = VqConfig::preset(bits)?;
                BackboneConfig::Vq(VqConfig {
                    group_size: v.group_size,
                    seed: v.seed,
                    ..p
                })
            }
        })
    }

    pub fn layer_backbone(&self, layer: usize) -> Result<BackboneConfig> {
        if layer == 0 {
            self.first_layer_backbone()
        } else {
            Ok(self.backbone)
        }
    }
}

/// Token ranges (relative to the sequence start) of the quantized segments of
/// a sequence of `len` tokens: after `sinks` exact tokens, full runs of
/// `buffer` tokens, plus a short last run when `final_flush` is set.
pub fn segment_ranges(
    len: usize,
    sinks: usize,
    buffer: usize,
    final_flush: bool,
) -> Vec<Range<usize>> {
    let mut out = Vec::new();
    let mut start = sinks.min(len);
    while len - start >= buffer {
        out.push(start..start + buffer);
        start += buffer;
    }
    if final_flush && start < len {
        out.push(start..len);
    }
    out
}

/// Quantizes `target − prediction` and returns the block together with the
/// reconstruction, computed by the same routine the decoder uses.
pub fn encode_residual(
    target: &Matrix,
    prediction: Option<&Matrix>,
    backbone: &BackboneConfig,
) -> Result<(QuantizedBlock, Matrix)> {
    let block = match prediction {
        Some(p) => {
            let mut r = target.clone();
            r.sub_assign(p)?;
            quantize(&r, backbone)?
        }
        None => quantize(target, backbone)?,
    };
    let hat = decode_residual(&block, prediction)?;
    Ok((block, hat))
}

/// `Q⁻¹(block) + prediction`.
pub fn decode_residual(block: &QuantizedBlock, prediction: Option<&Matrix>) -> Result<Matrix> {
    let mut hat = block.dequantize()?;
    if let Some(p) = prediction {
        hat.add_assign(p)?;
    }
    Ok(hat)
}

/// Key prediction from the previous layer's reconstructed keys.
pub fn predict_keys(p: &LinearPredictor, prev_k: &Matrix) -> Result<Matrix> {
    p.predict(prev_k)
}

/// Value prediction from `[previous reconstructed values, current reconstructed keys]`.
pub fn predict_values(p: &LinearPredictor, prev_v: &Matrix, k_hat: &Matrix) -> Result<Matrix> {
    p.predict_parts(&[prev_v, k_hat])
}

/// A quantized key/value residual pair for one token range of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedBlock {
    pub keys: QuantizedBlock,
    pub values: QuantizedBlock,
}

/// Reconstructed keys and values.
pub type Recon = (Matrix, Matrix);

/// Per-layer encode/decode. `prev` is the reconstruction of the previous
/// layer for the same tokens; it is required whenever `predictors` is set.
pub fn encode_block(
    backbone: &BackboneConfig,
    predictors: Option<&LayerPredictors>,
    k: &Matrix,
    v: &Matrix,
    prev: Option<(&Matrix, &Matrix)>,
) -> Result<(EncodedBlock, Recon)> {
    let (kp, prev_v) = match (predictors, prev) {
        (Some(p), Some((pk, pv))) => (Some(predict_keys(&p.key, pk)?), Some(pv)),
        (Some(_), None) => {
            return config_err("encoding with predictors needs the previous layer's reconstruction")
        }
        _ => (None, None),
    };
    let (kq, k_hat) = encode_residual(k, kp.as_ref(), backbone)?;
    let vp = match (predictors, prev_v) {
        (Some(p), Some(pv)) => Some(predict_values(&p.value, pv, &k_hat)?),
        _ => None,
    };
    let (vq, v_hat) = encode_residual(v, vp.as_ref(), backbone)?;
    Ok((
        EncodedBlock {
            keys: kq,
            values: vq,
        },
        (k_hat, v_hat),
    ))
}

pub fn decode_block(
    predictors: Option<&LayerPredictors>,
    block: &EncodedBlock,
    prev: Option<(&Matrix, &Matrix)>,
) -> Result<Recon> {
    let (kp, prev_v) = match (predictors, prev) {
        (Some(p), Some((pk, pv))) => (Some(predict_keys(&p.key, pk)?), Some(pv)),
        (Some(_), None) => {
            return config_err("decoding with predictors needs the previous layer's reconstruction")
        }
        _ => (None, None),
    };
    let k_hat = decode_residual(&block.keys, kp.as_ref())?;
    let vp = match (predictors, prev_v) {
        (Some(p), Some(pv)) => Some(predict_values(&p.value, pv, &k_hat)?),
        _ => None,
    };
    let v_hat = decode_residual(&block.values, vp.as_ref())?;
    Ok((k_hat, v_hat))
}

/// Converts stored keys from the trace's rotary mode to `target`.
pub fn convert_keys(
    k: &Matrix,
    meta: &TraceMeta,
    positions: &[usize],
    target: RopeMode,
) -> Result<Option<Matrix>> {
    Ok(match (meta.rope_mode, target) {
        (a, b) if a == b => None,
        (RopeMode::PreRope, RopeMode::PostRope) => {
            Some(apply_rope(k, positions, meta.head_dim, meta.rope_theta)?)
        }
        _ => Some(inverse_rope(k, positions, meta.head_dim, meta.rope_theta)?),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::LinearMap;
    use crate::predictor::PredictorKind;
    use crate::rng::Stream;

    fn gaussian(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut s = Stream::new(seed);
        let mut d = vec![0.0; rows * cols];
        s.fill_normal(&mut d, 1.0);
        Matrix::from_vec(rows, cols, d).unwrap()
    }

    fn random_predictors(kv: usize, seed: u64) -> LayerPredictors {
        let mut s = Stream::new(seed);
        let mut key = LinearPredictor::zero(PredictorKind::Key, kv);
        let mut value = LinearPredictor::zero(PredictorKind::Value, kv);
        for m in [&mut key.map, &mut value.map] {
            s.fill_normal(m.weight.as_mut_slice(), 0.2);
            s.fill_normal(&mut m.bias, 0.1);
        }
        LayerPredictors { key, value }
    }

    #[test]
    fn segments_follow_buffer_counts() {
        assert_eq!(segment_ranges(4 + 127, 4, 128, false), vec![]);
        assert_eq!(segment_ranges(4 + 128, 4, 128, false), vec![4..132]);
        assert_eq!(segment_ranges(300, 4, 128, false), vec![4..132, 132..260]);
        assert_eq!(
            segment_ranges(300, 4, 128, true),
            vec![4..132, 132..260, 260..300]
        );
        assert_eq!(segment_ranges(3, 4, 2, true), vec![]);
    }

    #[test]
    fn first_layer_uses_same_family() {
        let cfg = CacheConfig::default();
        match cfg.first_layer_backbone().unwrap() {
            BackboneConfig::Vq(v) => assert_eq!((v.dim, v.codebook_size), (2, 256)),
            other => panic!("{other:?}"),
        }
        let cfg = CacheConfig {
            first_layer_bits: None,
            ..cfg
        };
        assert_eq!(
            cfg.first_layer_backbone().unwrap(),
            BackboneConfig::Identity
        );
        let u = CacheConfig::with_backbone(BackboneConfig::Uniform(UniformConfig::new(2)));
        assert_eq!(
            u.layer_backbone(0).unwrap(),
            BackboneConfig::Uniform(UniformConfig::new(4))
        );
    }

    #[test]
    fn zero_predictors_reduce_to_plain_quantization() {
        let bb = BackboneConfig::Uniform(UniformConfig::new(2));
        let (k, v) = (gaussian(16, 8, 1), gaussian(16, 8, 2));
        let prev = (gaussian(16, 8, 3), gaussian(16, 8, 4));
        let zero = LayerPredictors {
            key: LinearPredictor::zero(PredictorKind::Key, 8),
            value: LinearPredictor::zero(PredictorKind::Value, 8),
        };
        let (enc, (kh, vh)) =
            encode_block(&bb, Some(&zero), &k, &v, Some((&prev.0, &prev.1))).unwrap();
        assert_eq!(enc.keys, quantize(&k, &bb).unwrap());
        assert_eq!(enc.values, quantize(&v, &bb).unwrap());
        assert_eq!(kh, enc.keys.dequantize().unwrap());
        assert_eq!(vh, enc.values.dequantize().unwrap());
    }

    #[test]
    fn encode_and_decode_agree_bitwise() {
        let bb = BackboneConfig::Vq(VqConfig::preset(2).unwrap());
        let p = random_predictors(16, 5);
        let (k, v) = (gaussian(64, 16, 6), gaussian(64, 16, 7));
        let prev = (gaussian(64, 16, 8), gaussian(64, 16, 9));
        let (enc, hat) = encode_block(&bb, Some(&p), &k, &v, Some((&prev.0, &prev.1))).unwrap();
        let dec = decode_block(Some(&p), &enc, Some((&prev.0, &prev.1))).unwrap();
        assert_eq!(hat, dec);
    }

    #[test]
    fn perfect_prediction_leaves_zero_residual() {
        let bb = BackboneConfig::Vq(VqConfig::preset(2).unwrap());
        let prev_k = gaussian(32, 8, 10);
        let prev_v = gaussian(32, 8, 11);
        let mut key = LinearPredictor::zero(PredictorKind::Key, 8);
        key.map = LinearMap::new(Matrix::identity(8), vec![0.0; 8]).unwrap();
        let value = LinearPredictor::zero(PredictorKind::Value, 8);
        let p = LayerPredictors { key, value };
        let zeros = Matrix::zeros(32, 8);
        let (enc, (kh, vh)) =
            encode_block(&bb, Some(&p), &prev_k, &zeros, Some((&prev_k, &prev_v))).unwrap();
        assert!(enc.keys.scales.iter().all(|s| s.to_f32() == 0.0));
        assert_eq!(kh, prev_k);
        assert_eq!(vh, zeros);
    }

    #[test]
    fn predictors_require_previous_layer() {
        let bb = BackboneConfig::Identity;
        let p = random_predictors(4, 1);
        let k = gaussian(2, 4, 1);
        assert!(encode_block(&bb, Some(&p), &k, &k, None).is_err());
    }
}
