//! Sequential predictor training on reconstructed inputs.
//!
//! Layers are visited in order. Layer 0 is quantized on its own; for every
//! later layer a key predictor is fit from the previous layer's reconstructed
//! keys, the key residual is quantized, and the value predictor is fit from
//! `[previous reconstructed values, current reconstructed keys]`. The
//! reconstructions are produced segment by segment exactly as the cache would
//! produce them, so replaying the trace reproduces them bit for bit.
//!
//! Only the reconstructed previous layer and the current layer are held at a
//! time; the current layer is overwritten in place by its reconstruction.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::kvcache::{convert_keys, encode_residual, segment_ranges, CacheConfig};
use crate::linalg::{ridge_fit_parts, EvrAggregation, LinearMap, Matrix};
use crate::predictor::{
    backbone_hash, CalibrationMeta, Geometry, LayerPredictors, LinearPredictor, PredictorKind,
    PredictorSet,
};
use crate::quantizer::BackboneConfig;
use crate::report::{ErrorStats, ErrorSummary, SCHEMA_VERSION};
use crate::rng::{derive_seed, Stream};
use crate::trace_io::{LayerSource, TraceMeta};

/// Fits with more rows than this use a seeded uniform subsample.
pub const DEFAULT_MAX_FIT_ROWS: usize = 1 << 22;
const EVAL_CHUNK_ROWS: usize = 4096;
const SUBSAMPLE_LABEL: u64 = 0x5355_4253;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibConfig {
    pub lambda: f64,
    pub seed: u64,
    pub cache: CacheConfig,
    /// Trailing sequences held out for evaluation; `None` holds out one in
    /// eight (at least one when there are two or more), `Some(0)` none.
    pub holdout_sequences: Option<usize>,
    pub max_fit_rows: usize,
    pub aggregation: EvrAggregation,
}

impl Default for CalibConfig {
    fn default() -> Self {
        Self {
            lambda: 1e-3,
            seed: 0,
            cache: CacheConfig::default(),
            holdout_sequences: None,
            max_fit_rows: DEFAULT_MAX_FIT_ROWS,
            aggregation: EvrAggregation::Pooled,
        }
    }
}

impl CalibConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return config_err(format!(
                "lambda must be finite and >= 0, got {}",
                self.lambda
            ));
        }
        if self.max_fit_rows == 0 {
            return config_err("max_fit_rows must be positive");
        }
        self.cache.validate()
    }

    /// `(train, holdout)` sequence indices.
    pub fn split(&self, n_sequences: usize) -> Result<(Vec<usize>, Vec<usize>)> {
        let h = self.holdout_sequences.unwrap_or(if n_sequences >= 2 {
            (n_sequences / 8).max(1)
        } else {
            0
        });
        if h >= n_sequences {
            return config_err(format!(
                "holding out {h} of {n_sequences} sequences leaves nothing to train on"
            ));
        }
        Ok((
            (0..n_sequences - h).collect(),
            (n_sequences - h..n_sequences).collect(),
        ))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerCalib {
    pub layer: usize,
    /// Holdout EVR of the key predictor on reconstructed inputs.
    pub key_predictor_evr: Option<f64>,
    pub value_predictor_evr: Option<f64>,
    pub train_key_predictor_evr: Option<f64>,
    pub train_value_predictor_evr: Option<f64>,
    /// EVR of the quantized residual against the residual.
    pub key_residual_evr: Option<f64>,
    pub value_residual_evr: Option<f64>,
    pub keys: Option<ErrorSummary>,
    pub values: Option<ErrorSummary>,
    /// Plain backbone quantization of the same segments (zero predictors).
    pub baseline_keys: Option<ErrorSummary>,
    pub baseline_values: Option<ErrorSummary>,
    pub key_error_ratio: Option<f64>,
    pub value_error_ratio: Option<f64>,
    /// `(mse_k + mse_v) / (baseline mse_k + baseline mse_v)`.
    pub error_ratio: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CalibSummary {
    pub key_predictor_evr: Option<f64>,
    pub value_predictor_evr: Option<f64>,
    /// Mean of the two above.
    pub predictor_evr: Option<f64>,
    pub train_key_predictor_evr: Option<f64>,
    pub train_value_predictor_evr: Option<f64>,
    pub key_error_ratio: Option<f64>,
    pub value_error_ratio: Option<f64>,
    /// Mean over layers `1..L` of the per-layer error ratio.
    pub error_ratio: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibReport {
    pub schema_version: u32,
    pub kind: String,
    pub config: CalibConfig,
    pub backbone: String,
    pub source: String,
    pub train_sequences: Vec<usize>,
    pub eval_sequences: Vec<usize>,
    pub fit_rows: usize,
    pub layers: Vec<LayerCalib>,
    pub summary: CalibSummary,
    #[serde(default)]
    pub notes: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct Calibration {
    pub predictors: PredictorSet,
    pub report: CalibReport,
}

/// Hooks into a calibration run.
pub trait CalibObserver {
    /// Reconstructions of `layer` for every token (keys in the cache's rotary mode).
    fn layer_done(&mut self, _layer: usize, _k_hat: &Matrix, _v_hat: &Matrix) {}
    /// Bytes currently held in layer-sized tensors and fitted predictors.
    fn memory(&mut self, _live_bytes: usize) {}
}

impl CalibObserver for () {}

/// Keeps every reconstruction; handy for tests.
#[derive(Default)]
pub struct CollectReconstructions(pub Vec<(Matrix, Matrix)>);

impl CalibObserver for CollectReconstructions {
    fn layer_done(&mut self, _layer: usize, k: &Matrix, v: &Matrix) {
        self.0.push((k.clone(), v.clone()));
    }
}

/// Live/peak byte counter for the tensors a run holds.
#[derive(Default)]
struct Ledger {
    live: usize,
}

impl Ledger {
    fn hold(&mut self, bytes: usize, obs: &mut dyn CalibObserver) {
        self.live += bytes;
        obs.memory(self.live);
    }

    fn release(&mut self, bytes: usize, obs: &mut dyn CalibObserver) {
        self.live -= bytes;
        obs.memory(self.live);
    }
}

fn matrix_bytes(m: &Matrix) -> usize {
    m.len() * std::mem::size_of::<f32>()
}

fn map_bytes(m: &LinearMap) -> usize {
    (m.weight.len() + m.bias.len()) * std::mem::size_of::<f32>()
}

/// Rows of `seqs` at or after position `skip` within their sequence.
fn rows_of(meta: &TraceMeta, seqs: &[usize], skip: usize) -> Vec<usize> {
    let ranges = meta.sequence_ranges();
    seqs.iter()
        .flat_map(|&s| (ranges[s].start + skip).min(ranges[s].end)..ranges[s].end)
        .collect()
}

/// Sorted uniform subsample of `rows` without replacement.
fn subsample(rows: &[usize], max: usize, seed: u64) -> Vec<usize> {
    if rows.len() <= max {
        return rows.to_vec();
    }
    let mut idx: Vec<usize> = rows.to_vec();
    let mut s = Stream::new(seed);
    for i in 0..max {
        let span = (idx.len() - i) as u128;
        let j = i + ((s.next_u64() as u128 * span) >> 64) as usize;
        idx.swap(i, j);
    }
    idx.truncate(max);
    idx.sort_unstable();
    idx
}

fn summary(s: &ErrorStats, agg: EvrAggregation) -> Option<ErrorSummary> {
    s.summary(agg)
}

fn evr(s: &ErrorStats, agg: EvrAggregation) -> Option<f64> {
    if s.rows() < 2 {
        None
    } else {
        s.evr(agg).ok()
    }
}

/// Error statistics of `predict(parts) ≈ target` over `rows`, in chunks.
fn prediction_stats(
    map: &LinearMap,
    parts: &[&Matrix],
    target: &Matrix,
    rows: &[usize],
) -> Result<ErrorStats> {
    let partials: Vec<ErrorStats> = rows
        .par_chunks(EVAL_CHUNK_ROWS)
        .map(|chunk| {
            let gathered: Vec<Matrix> = parts.iter().map(|p| p.gather_rows(chunk)).collect();
            let refs: Vec<&Matrix> = gathered.iter().collect();
            let pred = map.apply_parts(&refs)?;
            let mut st = ErrorStats::new(target.cols());
            for (i, &r) in chunk.iter().enumerate() {
                st.add_row(target.row(r), pred.row(i));
            }
            Ok(st)
        })
        .collect::<Result<_>>()?;
    let mut out = ErrorStats::new(target.cols());
    partials.iter().for_each(|p| out.merge(p));
    Ok(out)
}

/// Stats gathered while one role of one layer is quantized.
struct RoleStats {
    recon: ErrorStats,
    baseline: ErrorStats,
    residual: ErrorStats,
}

fn segment_job(
    target: &Matrix,
    map: Option<&LinearMap>,
    parts: &[&Matrix],
    backbone: &BackboneConfig,
    eval: bool,
    a: usize,
    b: usize,
) -> Result<(Matrix, Option<RoleStats>)> {
    let kv = target.cols();
    let t = target.slice_rows(a, b);
    let pred = match map {
        Some(m) => {
            let sliced: Vec<Matrix> = parts.iter().map(|p| p.slice_rows(a, b)).collect();
            let refs: Vec<&Matrix> = sliced.iter().collect();
            Some(m.apply_parts(&refs)?)
        }
        None => None,
    };
    let (_, hat) = encode_residual(&t, pred.as_ref(), backbone)?;
    if !eval {
        return Ok((hat, None));
    }
    let mut rs = RoleStats {
        recon: ErrorStats::new(kv),
        baseline: ErrorStats::new(kv),
        residual: ErrorStats::new(kv),
    };
    let base = match &pred {
        Some(_) => encode_residual(&t, None, backbone)?.1,
        None => hat.clone(),
    };
    let mut res = vec![0f32; kv];
    let mut res_hat = vec![0f32; kv];
    for r in 0..t.rows() {
        rs.recon.add_row(t.row(r), hat.row(r));
        rs.baseline.add_row(t.row(r), base.row(r));
        let p = pred.as_ref().map(|p| p.row(r));
        for c in 0..kv {
            let pc = p.map_or(0.0, |p| p[c]);
            res[c] = t.row(r)[c] - pc;
            res_hat[c] = hat.row(r)[c] - pc;
        }
        rs.residual.add_row(&res, &res_hat);
    }
    Ok((hat, Some(rs)))
}

/// Quantizes every segment of `target` in place: the residual against
/// `predict(parts)` (or the raw values when `map` is `None`) is quantized and
/// the rows are overwritten with the reconstruction. Statistics cover the
/// non-sink rows of `eval` sequences.
fn quantize_in_place(
    target: &mut Matrix,
    map: Option<&LinearMap>,
    parts: &[&Matrix],
    backbone: &BackboneConfig,
    meta: &TraceMeta,
    cache: &CacheConfig,
    eval: &[bool],
) -> Result<RoleStats> {
    let kv = target.cols();
    let ranges = meta.sequence_ranges();
    let jobs: Vec<(usize, usize, usize)> = ranges
        .iter()
        .enumerate()
        .flat_map(|(s, r)| {
            segment_ranges(
                r.len(),
                cache.sink_tokens,
                cache.buffer_tokens,
                cache.final_flush,
            )
            .into_iter()
            .map(move |seg| (s, r.start + seg.start, r.start + seg.end))
        })
        .collect();
    let mut out = RoleStats {
        recon: ErrorStats::new(kv),
        baseline: ErrorStats::new(kv),
        residual: ErrorStats::new(kv),
    };
    // Exact rows (sinks, short tails) of evaluated sequences count toward
    // the reconstruction and baseline statistics with zero error.
    for (s, r) in ranges.iter().enumerate() {
        if !eval[s] {
            continue;
        }
        let sinks = cache.sink_tokens.min(r.len());
        let segs = segment_ranges(
            r.len(),
            cache.sink_tokens,
            cache.buffer_tokens,
            cache.final_flush,
        );
        let covered = segs.last().map_or(sinks, |g| g.end);
        for p in covered..r.len() {
            let row = target.row(r.start + p);
            out.recon.add_row(row, row);
            out.baseline.add_row(row, row);
        }
    }
    let batch = 4 * rayon::current_num_threads();
    for group in jobs.chunks(batch) {
        let target_ro: &Matrix = target;
        let outputs: Vec<(Matrix, Option<RoleStats>)> = group
            .par_iter()
            .map(|&(s, a, b)| segment_job(target_ro, map, parts, backbone, eval[s], a, b))
            .collect::<Result<_>>()?;
        for ((_, a, _), (hat, stats)) in group.iter().zip(outputs) {
            if let Some(st) = stats {
                out.recon.merge(&st.recon);
                out.baseline.merge(&st.baseline);
                out.residual.merge(&st.residual);
            }
            target.write_rows(*a, &hat);
        }
    }
    Ok(out)
}

enum Mode<'a> {
    Fit,
    Given(&'a PredictorSet),
}

struct Run {
    layers: Vec<LayerPredictors>,
    report: Vec<LayerCalib>,
    fit_rows: usize,
}

fn ratio(a: &ErrorStats, b: &ErrorStats) -> Option<f64> {
    let (num, den) = (a.mse(), b.mse());
    (a.rows() > 0 && den > 0.0).then(|| num / den)
}

fn rollout<S: LayerSource>(
    src: &mut S,
    cfg: &CalibConfig,
    mode: Mode<'_>,
    train: &[usize],
    eval: &[usize],
    obs: &mut dyn CalibObserver,
) -> Result<Run> {
    let meta = src.meta().clone();
    let agg = cfg.aggregation;
    let cache = &cfg.cache;
    let first = cache.first_layer_backbone()?;
    let positions = meta.positions();
    let mut eval_mask = vec![false; meta.n_sequences];
    eval.iter().for_each(|&s| eval_mask[s] = true);
    let fit_all = rows_of(&meta, train, cache.sink_tokens);
    let eval_rows = rows_of(&meta, eval, cache.sink_tokens);
    if matches!(mode, Mode::Fit) && fit_all.is_empty() {
        return config_err("no training rows left after removing sink tokens");
    }

    let mut ledger = Ledger::default();
    let mut prev: Option<(Matrix, Matrix)> = None;
    let mut layers = Vec::new();
    let mut report = Vec::new();
    let mut fit_rows = 0;
    for i in 0..meta.n_layers {
        let (k, mut v) = src.layer(i)?;
        let mut k = convert_keys(&k, &meta, &positions, cache.rope_mode)?.unwrap_or(k);
        let layer_bytes = matrix_bytes(&k) + matrix_bytes(&v);
        ledger.hold(layer_bytes, obs);
        let mut lc = LayerCalib {
            layer: i,
            ..LayerCalib::default()
        };

        let Some((pk, pv)) = prev.take() else {
            let ks = quantize_in_place(&mut k, None, &[], &first, &meta, cache, &eval_mask)?;
            let vs = quantize_in_place(&mut v, None, &[], &first, &meta, cache, &eval_mask)?;
            lc.keys = summary(&ks.recon, agg);
            lc.values = summary(&vs.recon, agg);
            lc.key_residual_evr = evr(&ks.residual, agg);
            lc.value_residual_evr = evr(&vs.residual, agg);
            obs.layer_done(i, &k, &v);
            report.push(lc);
            prev = Some((k, v));
            continue;
        };

        let fit_seed = derive_seed(cfg.seed, SUBSAMPLE_LABEL ^ i as u64);
        let fit = subsample(&fit_all, cfg.max_fit_rows, fit_seed);
        fit_rows = fit.len();
        let key_map = match mode {
            Mode::Fit => ridge_fit_parts(&[&pk], &k, cfg.lambda, Some(&fit))?,
            Mode::Given(ps) => ps.layers[i - 1].key.map.clone(),
        };
        ledger.hold(map_bytes(&key_map), obs);
        lc.key_predictor_evr = evr(&prediction_stats(&key_map, &[&pk], &k, &eval_rows)?, agg);
        if matches!(mode, Mode::Fit) {
            lc.train_key_predictor_evr = evr(&prediction_stats(&key_map, &[&pk], &k, &fit)?, agg);
        }
        let ks = quantize_in_place(
            &mut k,
            Some(&key_map),
            &[&pk],
            &cfg.cache.backbone,
            &meta,
            cache,
            &eval_mask,
        )?;

        let value_map = match mode {
            Mode::Fit => ridge_fit_parts(&[&pv, &k], &v, cfg.lambda, Some(&fit))?,
            Mode::Given(ps) => ps.layers[i - 1].value.map.clone(),
        };
        ledger.hold(map_bytes(&value_map), obs);
        lc.value_predictor_evr = evr(
            &prediction_stats(&value_map, &[&pv, &k], &v, &eval_rows)?,
            agg,
        );
        if matches!(mode, Mode::Fit) {
            lc.train_value_predictor_evr =
                evr(&prediction_stats(&value_map, &[&pv, &k], &v, &fit)?, agg);
        }
        let vs = quantize_in_place(
            &mut v,
            Some(&value_map),
            &[&pv, &k],
            &cfg.cache.backbone,
            &meta,
            cache,
            &eval_mask,
        )?;

        lc.keys = summary(&ks.recon, agg);
        lc.values = summary(&vs.recon, agg);
        lc.baseline_keys = summary(&ks.baseline, agg);
        lc.baseline_values = summary(&vs.baseline, agg);
        lc.key_residual_evr = evr(&ks.residual, agg);
        lc.value_residual_evr = evr(&vs.residual, agg);
        lc.key_error_ratio = ratio(&ks.recon, &ks.baseline);
        lc.value_error_ratio = ratio(&vs.recon, &vs.baseline);
        let den = ks.baseline.mse() + vs.baseline.mse();
        lc.error_ratio =
            (ks.recon.rows() > 0 && den > 0.0).then(|| (ks.recon.mse() + vs.recon.mse()) / den);

        obs.layer_done(i, &k, &v);
        report.push(lc);
        ledger.release(matrix_bytes(&pk) + matrix_bytes(&pv), obs);
        drop((pk, pv));
        ledger.release(map_bytes(&key_map) + map_bytes(&value_map), obs);
        layers.push(LayerPredictors {
            key: LinearPredictor::new(PredictorKind::Key, key_map),
            value: LinearPredictor::new(PredictorKind::Value, value_map),
        });
        prev = Some((k, v));
    }
    Ok(Run {
        layers,
        report,
        fit_rows,
    })
}

fn mean(xs: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = xs.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn summarize(layers: &[LayerCalib]) -> CalibSummary {
    let l = || layers.iter().skip(1);
    let k = mean(l().map(|x| x.key_predictor_evr));
    let v = mean(l().map(|x| x.value_predictor_evr));
    CalibSummary {
        key_predictor_evr: k,
        value_predictor_evr: v,
        predictor_evr: k.zip(v).map(|(a, b)| (a + b) / 2.0),
        train_key_predictor_evr: mean(l().map(|x| x.train_key_predictor_evr)),
        train_value_predictor_evr: mean(l().map(|x| x.train_value_predictor_evr)),
        key_error_ratio: mean(l().map(|x| x.key_error_ratio)),
        value_error_ratio: mean(l().map(|x| x.value_error_ratio)),
        error_ratio: mean(l().map(|x| x.error_ratio)),
    }
}

fn check_source(meta: &TraceMeta) -> Result<()> {
    meta.validate()?;
    if meta.n_layers < 2 {
        return config_err("calibration needs a trace with at least two layers");
    }
    Ok(())
}

/// Trains predictors layer by layer on the train split of `src` and reports
/// on the holdout split.
pub fn calibrate<S: LayerSource>(src: &mut S, cfg: &CalibConfig) -> Result<Calibration> {
    calibrate_with(src, cfg, &mut ())
}

pub fn calibrate_with<S: LayerSource>(
    src: &mut S,
    cfg: &CalibConfig,
    obs: &mut dyn CalibObserver,
) -> Result<Calibration> {
    cfg.validate()?;
    let meta = src.meta().clone();
    check_source(&meta)?;
    let (train, holdout) = cfg.split(meta.n_sequences)?;
    let mut notes = Vec::new();
    let eval = if holdout.is_empty() {
        notes.push("no holdout sequences: metrics are computed on the training sequences".into());
        train.clone()
    } else {
        holdout.clone()
    };
    if meta.rope_mode != cfg.cache.rope_mode {
        notes.push(format!(
            "keys converted from {:?} to {:?} before calibration",
            meta.rope_mode, cfg.cache.rope_mode
        ));
    }
    let run = rollout(src, cfg, Mode::Fit, &train, &eval, obs)?;
    if run.fit_rows < meta.n_tokens && run.fit_rows == cfg.max_fit_rows {
        notes.push(format!(
            "predictor fits use a seeded subsample of {} rows",
            run.fit_rows
        ));
    }
    let backbone = cfg.cache.backbone;
    let cmeta = CalibrationMeta {
        lambda: cfg.lambda,
        seed: cfg.seed,
        sink_tokens: cfg.cache.sink_tokens,
        buffer_tokens: cfg.cache.buffer_tokens,
        rope_mode: cfg.cache.rope_mode,
        backbone,
        first_layer_bits: cfg.cache.first_layer_bits,
        backbone_hash: backbone_hash(&backbone),
        train_sequences: train.clone(),
        source: meta.source.clone(),
    };
    let predictors = PredictorSet::new(Geometry::of_trace(&meta), cmeta, run.layers)?;
    let report = CalibReport {
        schema_version: SCHEMA_VERSION,
        kind: "calibration".into(),
        config: cfg.clone(),
        backbone: backbone.label(),
        source: meta.source.clone(),
        train_sequences: train,
        eval_sequences: eval,
        fit_rows: run.fit_rows,
        summary: summarize(&run.report),
        layers: run.report,
        notes,
    };
    Ok(Calibration { predictors, report })
}

/// Rolls `ps` over every sequence of `src` and reports predictor and
/// reconstruction quality against the plain-quantization baseline.
pub fn holdout_report<S: LayerSource>(
    ps: &PredictorSet,
    src: &mut S,
    cfg: &CalibConfig,
) -> Result<CalibReport> {
    cfg.validate()?;
    let meta = src.meta().clone();
    check_source(&meta)?;
    ps.check_compatible(&meta, cfg.cache.rope_mode)?;
    if ps.meta.backbone_hash != backbone_hash(&cfg.cache.backbone) {
        return Err(Error::Incompatible(format!(
            "predictors were calibrated for {}, report requested for {}",
            ps.meta.backbone.label(),
            cfg.cache.backbone.label()
        )));
    }
    let all: Vec<usize> = (0..meta.n_sequences).collect();
    let run = rollout(src, cfg, Mode::Given(ps), &[], &all, &mut ())?;
    Ok(CalibReport {
        schema_version: SCHEMA_VERSION,
        kind: "holdout".into(),
        config: cfg.clone(),
        backbone: cfg.cache.backbone.label(),
        source: meta.source.clone(),
        train_sequences: ps.meta.train_sequences.clone(),
        eval_sequences: all,
        fit_rows: 0,
        summary: summarize(&run.report),
        layers: run.report,
        notes: Vec::new(),
    })
}
