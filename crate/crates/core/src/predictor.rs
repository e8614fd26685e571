//! Per-layer affine predictors and their on-disk format.
//!
//! Layer `i ≥ 1` has a key predictor `K̂_{i−1} ↦ K_i` and a value predictor
//! `[V̂_{i−1}, K̂_i] ↦ V_i` (previous values first). Layer 0 has none.
//!
//! File layout (little-endian): magic `AQKV`, version `u16`, `u32` layers,
//! kv heads and head dim, a payload scheme byte (0 = `f32`), a `u32`-length
//! JSON block with calibration metadata, then for each layer `1..L` the key
//! weight, key bias, value weight and value bias as row-major `f32`, then a
//! canary (input vector and the layer-1 value predictor's output on it), and
//! an xxh64 of everything before it.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::linalg::{LinearMap, Matrix};
use crate::quantizer::BackboneConfig;
use crate::rng::Stream;
use crate::trace_io::{RopeMode, TraceMeta};
use crate::wire::{self, Reader};

pub const PREDICTOR_MAGIC: &[u8; 4] = b"AQKV";
pub const PREDICTOR_VERSION: u16 = 1;
const SCHEME_F32: u8 = 0;
const CANARY_SEED: u64 = 0x4341_4E41_5259;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictorKind {
    Key,
    Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearPredictor {
    pub kind: PredictorKind,
    pub map: LinearMap,
}

impl LinearPredictor {
    pub fn new(kind: PredictorKind, map: LinearMap) -> Self {
        Self { kind, map }
    }

    pub fn zero(kind: PredictorKind, kv: usize) -> Self {
        let in_dim = match kind {
            PredictorKind::Key => kv,
            PredictorKind::Value => 2 * kv,
        };
        Self {
            kind,
            map: LinearMap::zero(in_dim, kv),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.map.in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.map.out_dim()
    }

    pub fn predict(&self, x: &Matrix) -> Result<Matrix> {
        self.map.apply(x)
    }

    /// Prediction from the concatenation of `parts` (for values: previous
    /// values, then current keys).
    pub fn predict_parts(&self, parts: &[&Matrix]) -> Result<Matrix> {
        self.map.apply_parts(parts)
    }

    pub fn n_params(&self) -> u64 {
        (self.map.weight.len() + self.map.bias.len()) as u64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Geometry {
    pub n_layers: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
}

/// `(name, layers, kv heads, head dim)` of common checkpoints.
pub const GEOMETRY_PRESETS: &[(&str, usize, usize, usize)] = &[
    ("llama3.2-3b", 28, 8, 128),
    ("llama3.1-8b", 32, 8, 128),
    ("llama3.1-70b", 80, 8, 128),
    ("qwen2.5-3b", 36, 2, 128),
    ("qwen2.5-7b", 28, 4, 128),
    ("qwen2.5-72b", 80, 8, 128),
];

impl Geometry {
    pub fn preset(name: &str) -> Option<Self> {
        GEOMETRY_PRESETS
            .iter()
            .find(|p| p.0.eq_ignore_ascii_case(name))
            .map(|&(_, n_layers, n_kv_heads, head_dim)| Self {
                n_layers,
                n_kv_heads,
                head_dim,
            })
    }

    /// Parameters of a full predictor set for this geometry.
    pub fn predictor_params(&self) -> u64 {
        let kv = self.kv_channels() as u64;
        self.n_layers.saturating_sub(1) as u64 * ((kv + 1) * kv + (2 * kv + 1) * kv)
    }

    pub fn kv_channels(&self) -> usize {
        self.n_kv_heads * self.head_dim
    }

    pub fn of_trace(meta: &TraceMeta) -> Self {
        Self {
            n_layers: meta.n_layers,
            n_kv_heads: meta.n_kv_heads,
            head_dim: meta.head_dim,
        }
    }
}

/// How a predictor set was trained.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationMeta {
    pub lambda: f64,
    pub seed: u64,
    pub sink_tokens: usize,
    pub buffer_tokens: usize,
    pub rope_mode: RopeMode,
    pub backbone: BackboneConfig,
    pub first_layer_bits: Option<u8>,
    /// xxh64 of the backbone configuration's JSON form.
    pub backbone_hash: u64,
    #[serde(default)]
    pub train_sequences: Vec<usize>,
    #[serde(default)]
    pub source: String,
}

pub fn backbone_hash(cfg: &BackboneConfig) -> u64 {
    wire::checksum(&serde_json::to_vec(cfg).expect("backbone config serializes"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerPredictors {
    pub key: LinearPredictor,
    pub value: LinearPredictor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictorSet {
    pub geometry: Geometry,
    pub meta: CalibrationMeta,
    /// Entry `j` holds the predictors of layer `j + 1`.
    pub layers: Vec<LayerPredictors>,
}

impl PredictorSet {
    pub fn new(
        geometry: Geometry,
        meta: CalibrationMeta,
        layers: Vec<LayerPredictors>,
    ) -> Result<Self> {
        let s = Self {
            geometry,
            meta,
            layers,
        };
        s.validate()?;
        Ok(s)
    }

    /// All-zero predictors: encoding then reduces to plain backbone quantization.
    pub fn zero(geometry: Geometry, meta: CalibrationMeta) -> Self {
        let kv = geometry.kv_channels();
        let layers = (1..geometry.n_layers)
            .map(|_| LayerPredictors {
                key: LinearPredictor::zero(PredictorKind::Key, kv),
                value: LinearPredictor::zero(PredictorKind::Value, kv),
            })
            .collect();
        Self {
            geometry,
            meta,
            layers,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let g = self.geometry;
        if g.n_layers < 2 {
            return shape_err("a predictor set needs at least two layers");
        }
        if self.layers.len() != g.n_layers - 1 {
            return shape_err(format!(
                "{} predictor pairs for {} layers (want L − 1)",
                self.layers.len(),
                g.n_layers
            ));
        }
        let kv = g.kv_channels();
        for (j, p) in self.layers.iter().enumerate() {
            let ok = p.key.kind == PredictorKind::Key
                && p.value.kind == PredictorKind::Value
                && (p.key.in_dim(), p.key.out_dim()) == (kv, kv)
                && (p.value.in_dim(), p.value.out_dim()) == (2 * kv, kv);
            if !ok {
                return shape_err(format!(
                    "predictors of layer {} have the wrong shape",
                    j + 1
                ));
            }
        }
        Ok(())
    }

    /// Predictors of `layer`; `None` for layer 0.
    pub fn layer(&self, layer: usize) -> Option<&LayerPredictors> {
        layer.checked_sub(1).and_then(|j| self.layers.get(j))
    }

    pub fn n_params(&self) -> u64 {
        self.layers
            .iter()
            .map(|p| p.key.n_params() + p.value.n_params())
            .sum()
    }

    /// Errors unless the set fits `meta`'s geometry and key rotary mode.
    pub fn check_compatible(&self, meta: &TraceMeta, rope_mode: RopeMode) -> Result<()> {
        let g = Geometry::of_trace(meta);
        if g != self.geometry {
            return Err(Error::Incompatible(format!(
                "predictors are for {} layers × {} kv heads × {} head dim, trace has {} × {} × {}",
                self.geometry.n_layers,
                self.geometry.n_kv_heads,
                self.geometry.head_dim,
                g.n_layers,
                g.n_kv_heads,
                g.head_dim
            )));
        }
        if rope_mode != self.meta.rope_mode {
            return Err(Error::Incompatible(format!(
                "predictors were trained on {:?} keys, cache uses {:?}",
                self.meta.rope_mode, rope_mode
            )));
        }
        Ok(())
    }

    fn canary_input(&self) -> Matrix {
        let kv = self.geometry.kv_channels();
        let mut s = Stream::new(CANARY_SEED);
        let mut x = vec![0.0f32; 2 * kv];
        s.fill_normal(&mut x, 1.0);
        Matrix::from_vec(1, 2 * kv, x).expect("canary shape")
    }

    /// Output of the layer-1 value predictor on the canary, fed as
    /// `[previous values, current keys]`.
    fn canary_output(&self, input: &Matrix) -> Result<Vec<f32>> {
        let kv = self.geometry.kv_channels();
        let prev_v = Matrix::from_vec(1, kv, input.as_slice()[..kv].to_vec())?;
        let cur_k = Matrix::from_vec(1, kv, input.as_slice()[kv..].to_vec())?;
        Ok(self.layers[0]
            .value
            .predict_parts(&[&prev_v, &cur_k])?
            .into_vec())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut out = Vec::new();
        out.extend_from_slice(PREDICTOR_MAGIC);
        wire::put_u16(&mut out, PREDICTOR_VERSION);
        let g = self.geometry;
        for d in [g.n_layers, g.n_kv_heads, g.head_dim] {
            wire::put_u32(&mut out, wire::u32_len(d, "geometry")?);
        }
        out.push(SCHEME_F32);
        let json = serde_json::to_vec(&self.meta)?;
        wire::put_u32(&mut out, wire::u32_len(json.len(), "metadata length")?);
        out.extend_from_slice(&json);
        for p in &self.layers {
            for m in [&p.key.map, &p.value.map] {
                wire::put_f32s(&mut out, m.weight.as_slice());
                wire::put_f32s(&mut out, &m.bias);
            }
        }
        let input = self.canary_input();
        let output = self.canary_output(&input)?;
        wire::put_u32(&mut out, wire::u32_len(input.len(), "canary")?);
        wire::put_f32s(&mut out, input.as_slice());
        wire::put_u32(&mut out, wire::u32_len(output.len(), "canary")?);
        wire::put_f32s(&mut out, &output);
        let sum = wire::checksum(&out);
        wire::put_u64(&mut out, sum);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let magic = r.bytes(4)?;
        if magic != PREDICTOR_MAGIC {
            return Err(Error::Format(format!(
                "bad magic {magic:?}, expected \"AQKV\""
            )));
        }
        let version = r.u16()?;
        if version != PREDICTOR_VERSION {
            return Err(Error::Format(format!(
                "unsupported predictor version {version}"
            )));
        }
        let body = wire::split_checksum(bytes)?;
        let mut r = Reader::new(&body[6..]);
        let geometry = Geometry {
            n_layers: r.u32()? as usize,
            n_kv_heads: r.u32()? as usize,
            head_dim: r.u32()? as usize,
        };
        let scheme = r.u8()?;
        if scheme != SCHEME_F32 {
            return Err(Error::Format(format!(
                "unsupported predictor payload scheme {scheme}"
            )));
        }
        let len = r.u32()? as usize;
        let meta: CalibrationMeta = serde_json::from_slice(r.bytes(len)?)
            .map_err(|e| Error::Format(format!("predictor metadata: {e}")))?;
        if geometry.n_layers < 2 || geometry.kv_channels() == 0 {
            return Err(Error::Format("bad predictor geometry".into()));
        }
        let kv = geometry.kv_channels();
        let mut read_map = |in_dim: usize| -> Result<LinearMap> {
            let w = Matrix::from_vec(in_dim, kv, r.f32s(in_dim * kv)?)?;
            LinearMap::new(w, r.f32s(kv)?)
        };
        let mut layers = Vec::with_capacity(geometry.n_layers - 1);
        for _ in 1..geometry.n_layers {
            let key = LinearPredictor::new(PredictorKind::Key, read_map(kv)?);
            let value = LinearPredictor::new(PredictorKind::Value, read_map(2 * kv)?);
            layers.push(LayerPredictors { key, value });
        }
        let set = PredictorSet::new(geometry, meta, layers)?;
        let n_in = r.u32()? as usize;
        let input = r.f32s(n_in)?;
        let n_out = r.u32()? as usize;
        let expected = r.f32s(n_out)?;
        r.expect_end()?;
        let input = Matrix::from_vec(1, n_in, input)
            .map_err(|_| Error::Format("canary input has the wrong length".into()))?;
        if n_in != 2 * kv || set.canary_output(&input)? != expected {
            return Err(Error::Format(
                "canary mismatch: value predictor inputs are not [previous values, current keys]"
                    .into(),
            ));
        }
        Ok(set)
    }

    /// Writes the binary file and a JSON sidecar next to it.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        std::fs::write(path, &bytes)?;
        let side = serde_json::json!({
            "format": "AQKV",
            "version": PREDICTOR_VERSION,
            "geometry": self.geometry,
            "calibration": self.meta,
            "parameters": self.n_params(),
            "checksum": format!("{:016x}", u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap())),
        });
        std::fs::write(sidecar_path(path), serde_json::to_vec_pretty(&side)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// `predictors.aqkv` → `predictors.aqkv.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}
