//! Streaming store: exact sinks, quantized residual segments, and a recent
//! buffer shared by all layers.
//!
//! Serialized as magic `AQKC`, version `u16`, a `u32`-length JSON header
//! (geometry, config, counts), then per layer the sink keys and values
//! (`f32`), a `u32` segment count and, per segment, `u32` start and length
//! followed by the key and value blocks; then per layer the buffered keys and
//! values (`f32`), and an xxh64 of everything before it.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{decode_block, encode_block, CacheConfig, EncodedBlock, Recon};
use crate::error::{shape_err, Error, Result};
use crate::linalg::Matrix;
use crate::predictor::{Geometry, PredictorSet};
use crate::quantizer::bits::{PREDICTOR_BITS, UNCOMPRESSED_BITS};
use crate::quantizer::{BackboneConfig, QuantizedBlock};
use crate::wire::{self, Reader};

pub const CACHE_MAGIC: &[u8; 4] = b"AQKC";
const CACHE_VERSION: u16 = 1;

/// Quantized residuals for the token range `start..start + len`.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
    pub block: EncodedBlock,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LayerStore {
    /// Row-major, `kv_channels` wide.
    pub sink_keys: Vec<f32>,
    pub sink_values: Vec<f32>,
    pub segments: Vec<Segment>,
}

#[derive(Clone, Debug)]
pub struct CompressedKVCache {
    geometry: Geometry,
    config: CacheConfig,
    first_backbone: BackboneConfig,
    predictors: Option<Arc<PredictorSet>>,
    layers: Vec<LayerStore>,
    buffer_keys: Vec<Vec<f32>>,
    buffer_values: Vec<Vec<f32>>,
    n_tokens: usize,
    n_sinks: usize,
    flushes: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    geometry: Geometry,
    config: CacheConfig,
    n_tokens: usize,
    n_sinks: usize,
    buffered: usize,
    flushes: usize,
    predictors: bool,
}

impl CompressedKVCache {
    pub fn new(
        geometry: Geometry,
        config: CacheConfig,
        predictors: Option<Arc<PredictorSet>>,
    ) -> Result<Self> {
        config.validate()?;
        if geometry.n_layers == 0 || geometry.kv_channels() == 0 {
            return shape_err("cache geometry needs at least one layer and channel");
        }
        if let Some(p) = &predictors {
            if p.geometry != geometry {
                return Err(Error::Incompatible(format!(
                    "predictor geometry {:?} does not match cache geometry {:?}",
                    p.geometry, geometry
                )));
            }
            if p.meta.rope_mode != config.rope_mode {
                return Err(Error::Incompatible(format!(
                    "predictors were trained on {:?} keys, cache uses {:?}",
                    p.meta.rope_mode, config.rope_mode
                )));
            }
        }
        let first_backbone = config.first_layer_backbone()?;
        let l = geometry.n_layers;
        Ok(Self {
            geometry,
            config,
            first_backbone,
            predictors,
            layers: vec![LayerStore::default(); l],
            buffer_keys: vec![Vec::new(); l],
            buffer_values: vec![Vec::new(); l],
            n_tokens: 0,
            n_sinks: 0,
            flushes: 0,
        })
    }

    pub fn geometry(&self) -> Geometry {
        self.geometry
    }

    pub fn config(&self) -> &CacheConfig {
        &self.config
    }

    pub fn layers(&self) -> &[LayerStore] {
        &self.layers
    }

    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    pub fn n_sinks(&self) -> usize {
        self.n_sinks
    }

    pub fn buffered(&self) -> usize {
        self.buffer_keys[0].len() / self.geometry.kv_channels()
    }

    pub fn flushes(&self) -> usize {
        self.flushes
    }

    /// Tokens held in quantized segments (identical for every layer).
    pub fn segment_tokens(&self) -> usize {
        self.layers[0].segments.iter().map(|s| s.len).sum()
    }

    fn backbone(&self, layer: usize) -> &BackboneConfig {
        if layer == 0 {
            &self.first_backbone
        } else {
            &self.config.backbone
        }
    }

    fn layer_predictors(&self, layer: usize) -> Option<&crate::predictor::LayerPredictors> {
        self.predictors.as_ref().and_then(|p| p.layer(layer))
    }

    /// Appends `t` new tokens given as one `t × kv_channels` matrix per layer
    /// for keys and for values. Flushes whenever `buffer_tokens` are buffered.
    pub fn append(&mut self, keys: &[Matrix], values: &[Matrix]) -> Result<()> {
        let (l, kv) = (self.geometry.n_layers, self.geometry.kv_channels());
        if keys.len() != l || values.len() != l {
            return shape_err(format!(
                "append needs {l} layers, got {} key and {} value layers",
                keys.len(),
                values.len()
            ));
        }
        let t = keys[0].rows();
        for m in keys.iter().chain(values) {
            if m.shape() != (t, kv) {
                return shape_err(format!(
                    "appended block is {:?}, expected ({t}, {kv})",
                    m.shape()
                ));
            }
            m.ensure_finite()?;
        }
        let to_sinks = self.config.sink_tokens.saturating_sub(self.n_sinks).min(t);
        for i in 0..l {
            let (k, v) = (keys[i].as_slice(), values[i].as_slice());
            let store = &mut self.layers[i];
            store.sink_keys.extend_from_slice(&k[..to_sinks * kv]);
            store.sink_values.extend_from_slice(&v[..to_sinks * kv]);
            self.buffer_keys[i].extend_from_slice(&k[to_sinks * kv..]);
            self.buffer_values[i].extend_from_slice(&v[to_sinks * kv..]);
        }
        self.n_sinks += to_sinks;
        self.n_tokens += t;
        while self.buffered() >= self.config.buffer_tokens {
            self.flush(self.config.buffer_tokens)?;
        }
        Ok(())
    }

    /// Ends the sequence: with `final_flush`, encodes whatever is buffered.
    pub fn finish(&mut self) -> Result<()> {
        let n = self.buffered();
        if self.config.final_flush && n > 0 {
            self.flush(n)?;
        }
        Ok(())
    }

    /// Encodes the oldest `n` buffered tokens layer by layer.
    fn flush(&mut self, n: usize) -> Result<()> {
        let kv = self.geometry.kv_channels();
        let start = self.n_tokens - self.buffered();
        let mut prev: Option<Recon> = None;
        for i in 0..self.geometry.n_layers {
            let k = Matrix::from_vec(n, kv, self.buffer_keys[i].drain(..n * kv).collect())?;
            let v = Matrix::from_vec(n, kv, self.buffer_values[i].drain(..n * kv).collect())?;
            let preds = self.layer_predictors(i);
            let prev_ref = if preds.is_some() {
                prev.as_ref().map(|(a, b)| (a, b))
            } else {
                None
            };
            let (block, hat) = encode_block(self.backbone(i), preds, &k, &v, prev_ref)?;
            self.layers[i].segments.push(Segment {
                start,
                len: n,
                block,
            });
            prev = Some(hat);
        }
        self.flushes += 1;
        Ok(())
    }

    /// Starts a layer-by-layer decode of the whole cache.
    pub fn reconstruction(&self) -> ReconstructionPass<'_> {
        ReconstructionPass {
            cache: self,
            next: 0,
            prev: Vec::new(),
        }
    }

    /// Reconstructions of all layers, in order.
    pub fn reconstruct_all(&self) -> Result<Vec<Recon>> {
        let mut pass = self.reconstruction();
        (0..self.geometry.n_layers).map(|i| pass.layer(i)).collect()
    }

    /// Exact stored bits: sinks and buffer at 16 bits per value, segment
    /// blocks, and predictor parameters when `with_predictors`.
    pub fn stored_bits(&self, with_predictors: bool) -> u64 {
        let kv = self.geometry.kv_channels() as u64;
        let exact =
            (self.n_sinks + self.buffered()) as u64 * kv * 2 * self.geometry.n_layers as u64;
        let mut bits = exact * UNCOMPRESSED_BITS as u64;
        for store in &self.layers {
            for s in &store.segments {
                bits += s.block.keys.stored_bits() + s.block.values.stored_bits();
            }
        }
        if with_predictors {
            if let Some(p) = &self.predictors {
                bits += p.n_params() * PREDICTOR_BITS as u64;
            }
        }
        bits
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CACHE_MAGIC);
        wire::put_u16(&mut out, CACHE_VERSION);
        let header = Header {
            geometry: self.geometry,
            config: self.config.clone(),
            n_tokens: self.n_tokens,
            n_sinks: self.n_sinks,
            buffered: self.buffered(),
            flushes: self.flushes,
            predictors: self.predictors.is_some(),
        };
        let json = serde_json::to_vec(&header)?;
        wire::put_u32(&mut out, wire::u32_len(json.len(), "header length")?);
        out.extend_from_slice(&json);
        for store in &self.layers {
            wire::put_f32s(&mut out, &store.sink_keys);
            wire::put_f32s(&mut out, &store.sink_values);
            wire::put_u32(&mut out, wire::u32_len(store.segments.len(), "segments")?);
            for s in &store.segments {
                wire::put_u32(&mut out, wire::u32_len(s.start, "segment start")?);
                wire::put_u32(&mut out, wire::u32_len(s.len, "segment length")?);
                s.block.keys.write_to(&mut out)?;
                s.block.values.write_to(&mut out)?;
            }
        }
        for (k, v) in self.buffer_keys.iter().zip(&self.buffer_values) {
            wire::put_f32s(&mut out, k);
            wire::put_f32s(&mut out, v);
        }
        let sum = wire::checksum(&out);
        wire::put_u64(&mut out, sum);
        Ok(out)
    }

    /// Restores a cache written by [`CompressedKVCache::to_bytes`]. The
    /// predictors are not part of the file and must be supplied again.
    pub fn from_bytes(bytes: &[u8], predictors: Option<Arc<PredictorSet>>) -> Result<Self> {
        let header = read_header(bytes)?;
        let body = wire::split_checksum(bytes)?;
        if header.predictors != predictors.is_some() {
            return Err(Error::Incompatible(if header.predictors {
                "cache was encoded with predictors; none supplied".into()
            } else {
                "cache was encoded without predictors".into()
            }));
        }
        let mut cache = Self::new(header.geometry, header.config, predictors)?;
        let kv = header.geometry.kv_channels();
        let mut r = Reader::new(body);
        r.bytes(4 + 2 + 4)?;
        let json_len = u32::from_le_bytes(body[6..10].try_into().unwrap()) as usize;
        r.bytes(json_len)?;
        for i in 0..header.geometry.n_layers {
            let backbone = *cache.backbone(i);
            let store = &mut cache.layers[i];
            store.sink_keys = r.f32s(header.n_sinks * kv)?;
            store.sink_values = r.f32s(header.n_sinks * kv)?;
            let n = r.u32()? as usize;
            for _ in 0..n {
                let start = r.u32()? as usize;
                let len = r.u32()? as usize;
                let keys = QuantizedBlock::read_from(&mut r, &backbone)?;
                let values = QuantizedBlock::read_from(&mut r, &backbone)?;
                if keys.shape() != (len, kv) || values.shape() != (len, kv) {
                    return Err(Error::Format(format!(
                        "segment at {start} has the wrong shape"
                    )));
                }
                store.segments.push(Segment {
                    start,
                    len,
                    block: EncodedBlock { keys, values },
                });
            }
        }
        for i in 0..header.geometry.n_layers {
            cache.buffer_keys[i] = r.f32s(header.buffered * kv)?;
            cache.buffer_values[i] = r.f32s(header.buffered * kv)?;
        }
        r.expect_end()?;
        cache.n_tokens = header.n_tokens;
        cache.n_sinks = header.n_sinks;
        cache.flushes = header.flushes;
        cache.check_partition()?;
        Ok(cache)
    }

    /// Every token is a sink, in exactly one segment, or buffered, in order.
    pub fn check_partition(&self) -> Result<()> {
        let buffered = self.buffered();
        for (i, store) in self.layers.iter().enumerate() {
            let mut pos = self.n_sinks;
            for s in &store.segments {
                if s.start != pos || s.len == 0 {
                    return Err(Error::Format(format!(
                        "layer {i}: segment at {} breaks token order",
                        s.start
                    )));
                }
                pos += s.len;
            }
            if pos + buffered != self.n_tokens {
                return Err(Error::Format(format!(
                    "layer {i}: sinks, segments and buffer cover {} of {} tokens",
                    pos + buffered,
                    self.n_tokens
                )));
            }
        }
        Ok(())
    }
}

fn read_header(bytes: &[u8]) -> Result<Header> {
    let mut r = Reader::new(bytes);
    let magic = r.bytes(4)?;
    if magic != CACHE_MAGIC {
        return Err(Error::Format(format!(
            "bad magic {magic:?}, expected \"AQKC\""
        )));
    }
    let version = r.u16()?;
    if version != CACHE_VERSION {
        return Err(Error::Format(format!(
            "unsupported cache version {version}"
        )));
    }
    let len = r.u32()? as usize;
    serde_json::from_slice(r.bytes(len)?).map_err(|e| Error::Format(format!("cache header: {e}")))
}

/// Header of a serialized cache as JSON, without decoding the payload.
pub fn cache_header_json(bytes: &[u8]) -> Result<serde_json::Value> {
    Ok(serde_json::to_value(read_header(bytes)?)?)
}

/// Decodes layers strictly in ascending order, keeping only the previous
/// layer's segment reconstructions.
pub struct ReconstructionPass<'a> {
    cache: &'a CompressedKVCache,
    next: usize,
    prev: Vec<Recon>,
}

impl ReconstructionPass<'_> {
    pub fn next_layer(&self) -> usize {
        self.next
    }

    /// Full `(K̂, V̂)` of `layer`: sinks, decoded segments, then the buffer.
    pub fn layer(&mut self, layer: usize) -> Result<Recon> {
        if layer != self.next {
            return Err(Error::Contract(format!(
                "layer {layer} requested out of order; next layer in this pass is {}",
                self.next
            )));
        }
        let c = self.cache;
        let kv = c.geometry.kv_channels();
        let store = &c.layers[layer];
        let preds = c.layer_predictors(layer);
        let decoded: Vec<Recon> = store
            .segments
            .iter()
            .enumerate()
            .map(|(j, s)| {
                let prev = if preds.is_some() {
                    self.prev.get(j).map(|(a, b)| (a, b))
                } else {
                    None
                };
                decode_block(preds, &s.block, prev)
            })
            .collect::<Result<_>>()?;
        let mut k = Vec::with_capacity(c.n_tokens * kv);
        let mut v = Vec::with_capacity(c.n_tokens * kv);
        k.extend_from_slice(&store.sink_keys);
        v.extend_from_slice(&store.sink_values);
        for (dk, dv) in &decoded {
            k.extend_from_slice(dk.as_slice());
            v.extend_from_slice(dv.as_slice());
        }
        k.extend_from_slice(&c.buffer_keys[layer]);
        v.extend_from_slice(&c.buffer_values[layer]);
        self.prev = decoded;
        self.next += 1;
        Ok((
            Matrix::from_vec(c.n_tokens, kv, k)?,
            Matrix::from_vec(c.n_tokens, kv, v)?,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantizer::{UniformConfig, VqConfig};
    use crate::rng::Stream;

    fn geometry() -> Geometry {
        Geometry {
            n_layers: 3,
            n_kv_heads: 2,
            head_dim: 4,
        }
    }

    fn block(rows: usize, seed: u64) -> Vec<Matrix> {
        let mut s = Stream::new(seed);
        (0..3)
            .map(|_| {
                let mut d = vec![0.0; rows * 8];
                s.fill_normal(&mut d, 1.0);
                Matrix::from_vec(rows, 8, d).unwrap()
            })
            .collect()
    }

    fn cfg(backbone: BackboneConfig, sinks: usize, buffer: usize) -> CacheConfig {
        CacheConfig {
            backbone,
            sink_tokens: sinks,
            buffer_tokens: buffer,
            ..CacheConfig::default()
        }
    }

    #[test]
    fn flush_counting() {
        let c = cfg(BackboneConfig::Uniform(UniformConfig::new(2)), 4, 16);
        let mut cache = CompressedKVCache::new(geometry(), c.clone(), None).unwrap();
        cache.append(&block(19, 1), &block(19, 2)).unwrap();
        assert_eq!(
            (cache.flushes(), cache.n_sinks(), cache.buffered()),
            (0, 4, 15)
        );
        let (k, _) = cache.reconstruct_all().unwrap().remove(1);
        assert_eq!(k, block(19, 1)[1]);
        cache.append(&block(1, 3), &block(1, 4)).unwrap();
        assert_eq!(
            (cache.flushes(), cache.buffered(), cache.segment_tokens()),
            (1, 0, 16)
        );
        cache.check_partition().unwrap();
    }

    #[test]
    fn identity_backbone_is_lossless() {
        let c = CacheConfig {
            first_layer_bits: None,
            ..cfg(BackboneConfig::Identity, 2, 5)
        };
        let mut cache = CompressedKVCache::new(geometry(), c, None).unwrap();
        let (k, v) = (block(23, 5), block(23, 6));
        cache.append(&k, &v).unwrap();
        assert_eq!(cache.flushes(), 4);
        for (i, (kh, vh)) in cache.reconstruct_all().unwrap().into_iter().enumerate() {
            assert_eq!(kh, k[i]);
            assert_eq!(vh, v[i]);
        }
    }

    #[test]
    fn out_of_order_layer_is_a_contract_error() {
        let c = cfg(BackboneConfig::Uniform(UniformConfig::new(2)), 0, 4);
        let mut cache = CompressedKVCache::new(geometry(), c, None).unwrap();
        cache.append(&block(8, 1), &block(8, 2)).unwrap();
        let mut pass = cache.reconstruction();
        assert!(matches!(pass.layer(1), Err(Error::Contract(_))));
        pass.layer(0).unwrap();
        assert!(matches!(pass.layer(0), Err(Error::Contract(_))));
        pass.layer(1).unwrap();
    }

    #[test]
    fn serialization_round_trip() {
        let c = CacheConfig {
            final_flush: true,
            ..cfg(BackboneConfig::Vq(VqConfig::preset(2).unwrap()), 3, 8)
        };
        let preds = Arc::new(PredictorSet::zero(
            geometry(),
            crate::predictor::CalibrationMeta {
                lambda: 1e-3,
                seed: 0,
                sink_tokens: 3,
                buffer_tokens: 8,
                rope_mode: c.rope_mode,
                backbone: c.backbone,
                first_layer_bits: c.first_layer_bits,
                backbone_hash: 0,
                train_sequences: vec![],
                source: String::new(),
            },
        ));
        let mut cache = CompressedKVCache::new(geometry(), c, Some(preds.clone())).unwrap();
        cache.append(&block(30, 1), &block(30, 2)).unwrap();
        cache.finish().unwrap();
        let bytes = cache.to_bytes().unwrap();
        let back = CompressedKVCache::from_bytes(&bytes, Some(preds)).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(
            back.reconstruct_all().unwrap(),
            cache.reconstruct_all().unwrap()
        );
        assert!(CompressedKVCache::from_bytes(&bytes, None).is_err());
        assert_eq!(cache_header_json(&bytes).unwrap()["n_tokens"], 30);
    }
}
