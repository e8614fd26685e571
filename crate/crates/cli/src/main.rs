//! `aquakv` command-line front end.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use aquakv::calibration::{calibrate, holdout_report, CalibConfig};
use aquakv::kvcache::{
    cache_header_json, encode_sequence, replay_trace, CacheConfig, ReplayConfig,
};
use aquakv::linalg::EvrAggregation;
use aquakv::predictor::{backbone_hash, Geometry, PredictorSet, GEOMETRY_PRESETS};
use aquakv::probes::{parse_sources, probe_matrix, ProbeConfig, Role};
use aquakv::pruning::{prune_then_compress, PruneConfig};
use aquakv::quantizer::{
    effective_bits, Axis, BackboneConfig, OverheadSpec, UniformConfig, VqConfig,
};
use aquakv::report::{Timing, SCHEMA_VERSION};
use aquakv::trace_io::{
    apply_rope, read_trace, synth_trace, write_trace, RopeMode, SynthConfig, TraceReader,
};
use aquakv::{wire, Error, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

const THREADS_ENV: &str = "AQUAKV_THREADS";

#[derive(Parser)]
#[command(
    name = "aquakv",
    version,
    about = "KV-cache compression with cross-layer predictors"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic residual-stream trace.
    Synth(SynthArgs),
    /// Linear dependency probes on a trace.
    Probe(ProbeArgs),
    /// Train per-layer predictors on a trace.
    Calibrate(CalibrateArgs),
    /// Stream a trace through the compressed cache and score it.
    Replay(ReplayArgs),
    /// Storage accounting for a cache geometry.
    Bits(BitsArgs),
    /// Print the header of a trace, predictor or cache file as JSON.
    Inspect(InspectArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum BackboneKind {
    Uniform,
    Vq,
    Identity,
}

#[derive(Clone, Copy, ValueEnum)]
enum RopeArg {
    Pre,
    Post,
}

impl From<RopeArg> for RopeMode {
    fn from(r: RopeArg) -> Self {
        match r {
            RopeArg::Pre => RopeMode::PreRope,
            RopeArg::Post => RopeMode::PostRope,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum AxisArg {
    PerToken,
    PerChannel,
}

#[derive(Clone, Copy, ValueEnum)]
enum AggArg {
    Pooled,
    ChannelMean,
}

impl From<AggArg> for EvrAggregation {
    fn from(a: AggArg) -> Self {
        match a {
            AggArg::Pooled => EvrAggregation::Pooled,
            AggArg::ChannelMean => EvrAggregation::ChannelMean,
        }
    }
}

#[derive(Args, Clone, Default)]
struct BackboneArgs {
    #[arg(long, value_enum)]
    backbone: Option<BackboneKind>,
    /// Bits per value (16 selects the uncompressed backbone).
    #[arg(long)]
    bits: Option<u8>,
    #[arg(long)]
    group_size: Option<usize>,
    /// Codeword dimension for the vq backbone (2, or 4 at 2 bits).
    #[arg(long)]
    vq_dim: Option<usize>,
    #[arg(long)]
    vq_seed: Option<u64>,
    #[arg(long, value_enum)]
    axis: Option<AxisArg>,
}

fn nominal_bits(b: &BackboneConfig) -> u8 {
    match b {
        BackboneConfig::Identity => 16,
        BackboneConfig::Uniform(u) => u.bits,
        BackboneConfig::Vq(v) => v.bits_per_value().round() as u8,
    }
}

impl BackboneArgs {
    fn is_empty(&self) -> bool {
        self.backbone.is_none()
            && self.bits.is_none()
            && self.group_size.is_none()
            && self.vq_dim.is_none()
            && self.vq_seed.is_none()
            && self.axis.is_none()
    }

    fn apply(&self, cur: BackboneConfig) -> Result<BackboneConfig> {
        if self.is_empty() {
            return Ok(cur);
        }
        let kind = match (self.backbone, self.bits) {
            (Some(k), _) => k,
            (None, Some(16)) => BackboneKind::Identity,
            (None, _) => match cur {
                BackboneConfig::Identity => BackboneKind::Identity,
                BackboneConfig::Uniform(_) => BackboneKind::Uniform,
                BackboneConfig::Vq(_) => BackboneKind::Vq,
            },
        };
        let bits = self.bits.unwrap_or_else(|| match cur {
            BackboneConfig::Identity => 2,
            other => nominal_bits(&other),
        });
        let out = match kind {
            BackboneKind::Identity => BackboneConfig::Identity,
            BackboneKind::Uniform => {
                let base = match cur {
                    BackboneConfig::Uniform(u) => u,
                    _ => UniformConfig::new(bits),
                };
                BackboneConfig::Uniform(UniformConfig {
                    bits,
                    group_size: self.group_size.unwrap_or(base.group_size),
                    axis: match self.axis {
                        Some(AxisArg::PerToken) => Axis::PerToken,
                        Some(AxisArg::PerChannel) => Axis::PerChannel,
                        None => base.axis,
                    },
                })
            }
            BackboneKind::Vq => {
                let base = match cur {
                    BackboneConfig::Vq(v) => Some(v),
                    _ => None,
                };
                let dim = self.vq_dim.or(base.map(|b| b.dim)).unwrap_or(2);
                let preset = match (dim, bits) {
                    (4, 2) => VqConfig::preset_d4(),
                    (2, b) => VqConfig::preset(b)?,
                    (d, b) => {
                        return Err(Error::Config(format!(
                            "no vq grid with d = {d} at {b} bits"
                        )))
                    }
                };
                BackboneConfig::Vq(VqConfig {
                    group_size: self
                        .group_size
                        .or(base.map(|b| b.group_size))
                        .unwrap_or(preset.group_size),
                    seed: self.vq_seed.or(base.map(|b| b.seed)).unwrap_or(0),
                    ..preset
                })
            }
        };
        out.validate()?;
        Ok(out)
    }
}

fn parse_first_layer(s: &str) -> std::result::Result<FirstLayer, String> {
    match s {
        "none" | "16" => Ok(FirstLayer(None)),
        _ => s
            .parse::<u8>()
            .map(|b| FirstLayer(Some(b)))
            .map_err(|_| format!("expected a bit width or \"none\", got {s:?}")),
    }
}

#[derive(Clone, Copy)]
struct FirstLayer(Option<u8>);

#[derive(Args, Clone, Default)]
struct CacheArgs {
    #[command(flatten)]
    backbone: BackboneArgs,
    #[arg(long)]
    sinks: Option<usize>,
    /// Recent-token buffer size.
    #[arg(long)]
    buffer: Option<usize>,
    /// Bits for layer 0, or "none" to keep it uncompressed.
    #[arg(long, value_parser = parse_first_layer)]
    first_layer_bits: Option<FirstLayer>,
    /// Encode the leftover buffer at the end of each sequence.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    final_flush: Option<bool>,
    #[arg(long, value_enum)]
    rope: Option<RopeArg>,
}

impl CacheArgs {
    fn apply(&self, c: &mut CacheConfig) -> Result<()> {
        c.backbone = self.backbone.apply(c.backbone)?;
        if let Some(s) = self.sinks {
            c.sink_tokens = s;
        }
        if let Some(b) = self.buffer {
            c.buffer_tokens = b;
        }
        if let Some(f) = self.first_layer_bits {
            c.first_layer_bits = f.0;
        }
        if let Some(f) = self.final_flush {
            c.final_flush = f;
        }
        if let Some(r) = self.rope {
            c.rope_mode = r.into();
        }
        c.validate()
    }
}

fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<Option<T>> {
    match path {
        None => Ok(None),
        Some(p) => {
            let bytes = fs::read(p)?;
            let v: Value = serde_json::from_slice(&bytes)
                .map_err(|e| Error::Config(format!("config file {}: {e}", p.display())))?;
            // Accept either the bare config or a whole report that embeds it.
            let v = v.get("config").cloned().unwrap_or(v);
            serde_json::from_value(v)
                .map(Some)
                .map_err(|e| Error::Config(format!("config file {}: {e}", p.display())))
        }
    }
}

fn require<T: Clone>(v: &Option<T>, flag: &str) -> Result<T> {
    v.clone()
        .ok_or_else(|| Error::Config(format!("missing required --{flag}")))
}

/// Writes `value` as pretty JSON to `path`, or to stdout.
fn emit(value: &Value, path: Option<&Path>) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    match path {
        Some(p) => fs::write(p, text)?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn envelope(command: &str, config: &impl Serialize, report: Value) -> Result<Value> {
    Ok(json!({
        "schema_version": SCHEMA_VERSION,
        "command": command,
        "config": serde_json::to_value(config)?,
        "report": report,
    }))
}

/// Timing is kept out of the report so reports stay byte-identical.
fn emit_timing(timing: &Timing, path: Option<&Path>) -> Result<()> {
    let v = json!({ "timing": timing });
    match path {
        Some(p) => fs::write(p, serde_json::to_string_pretty(&v)? + "\n")?,
        None => eprintln!("{}", serde_json::to_string(&v)?),
    }
    Ok(())
}

// ---------------------------------------------------------------- synth

#[derive(Args)]
struct SynthArgs {
    /// JSON file with a resolved synth config (flags override it).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    kv_heads: Option<usize>,
    #[arg(long)]
    head_dim: Option<usize>,
    #[arg(long)]
    hidden_dim: Option<usize>,
    /// Total tokens, split evenly across sequences.
    #[arg(long)]
    tokens: Option<usize>,
    #[arg(long)]
    seqs: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    sink_scale: Option<f64>,
    /// Skip the attention-score payload.
    #[arg(long)]
    no_stats: bool,
    /// Store keys before or after rotary embedding.
    #[arg(long, value_enum)]
    rope: Option<RopeArg>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct SynthRun {
    synth: SynthConfig,
    rope_mode: RopeMode,
    out: Option<PathBuf>,
}

fn run_synth(a: SynthArgs) -> Result<()> {
    let mut run: SynthRun = load_config(a.config.as_deref())?.unwrap_or_default();
    let s = &mut run.synth;
    macro_rules! set {
        ($($flag:ident => $field:ident),*) => {$(if let Some(v) = a.$flag { s.$field = v; })*};
    }
    set!(layers => n_layers, kv_heads => n_kv_heads, head_dim => head_dim, hidden_dim => hidden_dim,
         tokens => tokens, seqs => sequences, alpha => alpha, noise => noise, seed => seed,
         sink_scale => sink_scale);
    if a.no_stats {
        s.attention_stats = false;
    }
    if let Some(r) = a.rope {
        run.rope_mode = r.into();
    }
    if a.out.is_some() {
        run.out = a.out;
    }
    let out = require(&run.out, "out")?;
    let mut trace = synth_trace(&run.synth)?;
    if run.rope_mode == RopeMode::PostRope {
        let pos = trace.meta.positions();
        let (hd, theta) = (trace.meta.head_dim, trace.meta.rope_theta);
        for k in &mut trace.keys {
            *k = apply_rope(k, &pos, hd, theta)?;
        }
        trace.meta.rope_mode = RopeMode::PostRope;
    }
    write_trace(&trace, &out)?;
    let bytes = fs::read(&out)?;
    let report = json!({
        "path": out,
        "bytes": bytes.len(),
        "checksum": format!("{:016x}", wire::checksum(&bytes)),
        "meta": trace.meta,
    });
    emit(&envelope("synth", &run, report)?, None)
}

// ---------------------------------------------------------------- probe

#[derive(Args)]
struct ProbeArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Comma-separated sources, e.g. prevL1,prevL2,prevL3,prevT1,crossrole,prevL1+prevL2.
    #[arg(long)]
    sources: Option<String>,
    /// Comma-separated targets: keys, values.
    #[arg(long)]
    targets: Option<String>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    holdout: Option<usize>,
    #[arg(long)]
    skip_tokens: Option<usize>,
    #[arg(long, value_enum)]
    aggregation: Option<AggArg>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write per-layer values as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
struct ProbeRun {
    trace: Option<PathBuf>,
    sources: String,
    targets: Vec<Role>,
    probe: ProbeConfig,
    out: Option<PathBuf>,
    csv: Option<PathBuf>,
}

impl Default for ProbeRun {
    fn default() -> Self {
        Self {
            trace: None,
            sources: "prevL1,prevL2,prevL3,prevT1,prevT2,prevT3,crossrole".into(),
            targets: vec![Role::Keys, Role::Values],
            probe: ProbeConfig::default(),
            out: None,
            csv: None,
        }
    }
}

fn parse_targets(s: &str) -> Result<Vec<Role>> {
    s.split(',')
        .filter(|t| !t.trim().is_empty())
        .map(|t| match t.trim() {
            "keys" | "k" => Ok(Role::Keys),
            "values" | "v" => Ok(Role::Values),
            other => Err(Error::Config(format!("unknown probe target {other:?}"))),
        })
        .collect()
}

fn run_probe(a: ProbeArgs) -> Result<()> {
    let mut run: ProbeRun = load_config(a.config.as_deref())?.unwrap_or_default();
    if a.trace.is_some() {
        run.trace = a.trace;
    }
    if let Some(s) = a.sources {
        run.sources = s;
    }
    if let Some(t) = a.targets {
        run.targets = parse_targets(&t)?;
    }
    if let Some(l) = a.lambda {
        run.probe.lambda = l;
    }
    if a.holdout.is_some() {
        run.probe.holdout_sequences = a.holdout;
    }
    if let Some(s) = a.skip_tokens {
        run.probe.skip_tokens = s;
    }
    if let Some(g) = a.aggregation {
        run.probe.aggregation = g.into();
    }
    if a.out.is_some() {
        run.out = a.out;
    }
    if a.csv.is_some() {
        run.csv = a.csv;
    }
    let trace = read_trace(require(&run.trace, "trace")?)?;
    let sources = parse_sources(&run.sources)?;
    let report = probe_matrix(&trace, &run.targets, &sources, &run.probe)?;
    if let Some(p) = &run.csv {
        fs::write(p, report.to_csv())?;
    }
    emit(
        &envelope("probe", &run, serde_json::to_value(&report)?)?,
        run.out.as_deref(),
    )
}

// ---------------------------------------------------------------- calibrate

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Predictor file to write (a `.json` sidecar is written next to it).
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    cache: CacheArgs,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Trailing sequences held out for the report.
    #[arg(long)]
    holdout: Option<usize>,
    #[arg(long)]
    max_fit_rows: Option<usize>,
    /// Holdout report destination (stdout when absent).
    #[arg(long)]
    report: Option<PathBuf>,
    /// Timing destination (stderr when absent).
    #[arg(long)]
    timing: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct CalibrateRun {
    trace: Option<PathBuf>,
    out: Option<PathBuf>,
    calibration: CalibConfig,
    report: Option<PathBuf>,
}

fn run_calibrate(a: CalibrateArgs) -> Result<()> {
    let mut run: CalibrateRun = load_config(a.config.as_deref())?.unwrap_or_default();
    if a.trace.is_some() {
        run.trace = a.trace;
    }
    if a.out.is_some() {
        run.out = a.out;
    }
    if a.report.is_some() {
        run.report = a.report;
    }
    let c = &mut run.calibration;
    a.cache.apply(&mut c.cache)?;
    if let Some(l) = a.lambda {
        c.lambda = l;
    }
    if let Some(s) = a.seed {
        c.seed = s;
    }
    if a.holdout.is_some() {
        c.holdout_sequences = a.holdout;
    }
    if let Some(m) = a.max_fit_rows {
        c.max_fit_rows = m;
    }
    let trace_path = require(&run.trace, "trace")?;
    let out = require(&run.out, "out")?;
    let start = Instant::now();
    let mut reader = TraceReader::open(&trace_path)?;
    reader.verify()?;
    let result = calibrate(&mut reader, &run.calibration)?;
    result.predictors.save(&out)?;
    let report = json!({
        "predictors": out,
        "parameters": result.predictors.n_params(),
        "calibration": result.report,
    });
    emit(&envelope("calibrate", &run, report)?, run.report.as_deref())?;
    emit_timing(
        &Timing {
            seconds: start.elapsed().as_secs_f64(),
            ..Timing::default()
        },
        a.timing.as_deref(),
    )
}

// ---------------------------------------------------------------- replay

#[derive(Args)]
struct ReplayArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Predictor file; without it the plain-quantization baseline runs.
    #[arg(long)]
    predictors: Option<PathBuf>,
    #[command(flatten)]
    cache: CacheArgs,
    /// Tokens per append.
    #[arg(long)]
    chunk: Option<usize>,
    #[arg(long, value_enum)]
    aggregation: Option<AggArg>,
    /// Keep this fraction of tokens by accumulated attention before compressing.
    #[arg(long)]
    prune_budget: Option<f64>,
    /// Fraction of tokens kept as the most recent ones (default: half the budget).
    #[arg(long)]
    prune_recent: Option<f64>,
    /// Also score the predictor set against the plain-quantization baseline
    /// layer by layer (calibration-style holdout report).
    #[arg(long)]
    holdout_report: bool,
    /// Write the serialized cache of one sequence.
    #[arg(long)]
    save_cache: Option<PathBuf>,
    #[arg(long)]
    cache_sequence: Option<usize>,
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    timing: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct ReplayRun {
    trace: Option<PathBuf>,
    predictors: Option<PathBuf>,
    replay: ReplayConfig,
    prune: Option<PruneConfig>,
    holdout_report: bool,
    save_cache: Option<PathBuf>,
    cache_sequence: usize,
    report: Option<PathBuf>,
}

fn cache_from_predictors(ps: &PredictorSet) -> CacheConfig {
    CacheConfig {
        backbone: ps.meta.backbone,
        first_layer_bits: ps.meta.first_layer_bits,
        sink_tokens: ps.meta.sink_tokens,
        buffer_tokens: ps.meta.buffer_tokens,
        rope_mode: ps.meta.rope_mode,
        ..CacheConfig::default()
    }
}

fn run_replay(a: ReplayArgs) -> Result<()> {
    let from_file: Option<ReplayRun> = load_config(a.config.as_deref())?;
    let has_file = from_file.is_some();
    let mut run = from_file.unwrap_or_default();
    if a.trace.is_some() {
        run.trace = a.trace;
    }
    if a.predictors.is_some() {
        run.predictors = a.predictors;
    }
    let predictors = match &run.predictors {
        Some(p) => Some(Arc::new(PredictorSet::load(p)?)),
        None => None,
    };
    if let (false, Some(ps)) = (has_file, &predictors) {
        run.replay.cache = cache_from_predictors(ps);
    }
    a.cache.apply(&mut run.replay.cache)?;
    if let Some(c) = a.chunk {
        run.replay.chunk_tokens = c;
    }
    if let Some(g) = a.aggregation {
        run.replay.aggregation = g.into();
    }
    if a.prune_budget.is_some() || a.prune_recent.is_some() {
        let mut p = run.prune.clone().unwrap_or(PruneConfig {
            sink_tokens: run.replay.cache.sink_tokens,
            ..PruneConfig::default()
        });
        if let Some(b) = a.prune_budget {
            p.budget = b;
        }
        if a.prune_recent.is_some() {
            p.recent = a.prune_recent;
        }
        p.validate()?;
        run.prune = Some(p);
    }
    if a.holdout_report {
        run.holdout_report = true;
    }
    if a.save_cache.is_some() {
        run.save_cache = a.save_cache;
    }
    if let Some(s) = a.cache_sequence {
        run.cache_sequence = s;
    }
    if a.report.is_some() {
        run.report = a.report;
    }

    let trace = read_trace(require(&run.trace, "trace")?)?;
    let start = Instant::now();
    let mut notes = Vec::new();
    if let Some(ps) = &predictors {
        if ps.meta.backbone_hash != backbone_hash(&run.replay.cache.backbone) {
            notes.push(format!(
                "predictors were calibrated with {}, replaying with {}",
                ps.meta.backbone.label(),
                run.replay.cache.backbone.label()
            ));
        }
    }
    let mut report = match &run.prune {
        Some(p) => {
            let mut r = prune_then_compress(&trace, predictors.clone(), p, &run.replay)?;
            r.replay.timing = None;
            serde_json::to_value(&r)?
        }
        None => {
            let mut r = replay_trace(&trace, predictors.clone(), &run.replay)?;
            r.timing = None;
            serde_json::to_value(&r)?
        }
    };
    if run.holdout_report {
        let ps = predictors
            .as_deref()
            .ok_or_else(|| Error::Config("--holdout-report needs --predictors".into()))?;
        let cfg = CalibConfig {
            lambda: ps.meta.lambda,
            seed: ps.meta.seed,
            cache: run.replay.cache.clone(),
            aggregation: run.replay.aggregation,
            ..CalibConfig::default()
        };
        report["holdout"] = serde_json::to_value(holdout_report(ps, &mut &trace, &cfg)?)?;
    }
    if let Some(path) = &run.save_cache {
        let cache = encode_sequence(&trace, run.cache_sequence, predictors.clone(), &run.replay)?;
        fs::write(path, cache.to_bytes()?)?;
    }
    report["cli_notes"] = json!(notes);
    let seconds = start.elapsed().as_secs_f64();
    emit(&envelope("replay", &run, report)?, run.report.as_deref())?;
    emit_timing(
        &Timing {
            seconds,
            ..Timing::default()
        },
        a.timing.as_deref(),
    )
}

// ---------------------------------------------------------------- bits

#[derive(Args)]
struct BitsArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in model geometry (see --list-geometries).
    #[arg(long)]
    geometry: Option<String>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    kv_heads: Option<usize>,
    #[arg(long)]
    head_dim: Option<usize>,
    #[arg(long)]
    tokens: Option<usize>,
    #[command(flatten)]
    backbone: BackboneArgs,
    #[arg(long)]
    sinks: Option<usize>,
    #[arg(long)]
    buffer: Option<usize>,
    #[arg(long, value_parser = parse_first_layer)]
    first_layer_bits: Option<FirstLayer>,
    /// Count the storage of a full predictor set.
    #[arg(long)]
    with_predictors: bool,
    #[arg(long)]
    list_geometries: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
struct BitsRun {
    geometry_name: Option<String>,
    geometry: Option<Geometry>,
    tokens: usize,
    backbone: BackboneConfig,
    sink_tokens: usize,
    buffer_tokens: usize,
    /// `None`: layer 0 uses the main backbone. `Some(None)`: uncompressed.
    first_layer_bits: Option<Option<u8>>,
    with_predictors: bool,
}

impl Default for BitsRun {
    fn default() -> Self {
        Self {
            geometry_name: None,
            geometry: None,
            tokens: 0,
            backbone: BackboneConfig::Identity,
            sink_tokens: 0,
            buffer_tokens: 0,
            first_layer_bits: None,
            with_predictors: false,
        }
    }
}

fn run_bits(a: BitsArgs) -> Result<()> {
    if a.list_geometries {
        let list: Vec<Value> = GEOMETRY_PRESETS
            .iter()
            .map(|(n, l, h, d)| json!({"name": n, "n_layers": l, "n_kv_heads": h, "head_dim": d}))
            .collect();
        return emit(
            &json!({ "schema_version": SCHEMA_VERSION, "geometries": list }),
            None,
        );
    }
    let mut run: BitsRun = load_config(a.config.as_deref())?.unwrap_or_default();
    if let Some(name) = &a.geometry {
        let g = Geometry::preset(name).ok_or_else(|| {
            let names: Vec<&str> = GEOMETRY_PRESETS.iter().map(|p| p.0).collect();
            Error::Config(format!(
                "unknown geometry {name:?}; known: {}",
                names.join(", ")
            ))
        })?;
        run.geometry_name = Some(name.to_ascii_lowercase());
        run.geometry = Some(g);
    }
    if a.layers.is_some() || a.kv_heads.is_some() || a.head_dim.is_some() {
        let base = run.geometry.unwrap_or(Geometry {
            n_layers: 0,
            n_kv_heads: 0,
            head_dim: 0,
        });
        run.geometry = Some(Geometry {
            n_layers: a.layers.unwrap_or(base.n_layers),
            n_kv_heads: a.kv_heads.unwrap_or(base.n_kv_heads),
            head_dim: a.head_dim.unwrap_or(base.head_dim),
        });
        run.geometry_name = None;
    }
    if let Some(t) = a.tokens {
        run.tokens = t;
    }
    run.backbone = a.backbone.apply(run.backbone)?;
    if let Some(s) = a.sinks {
        run.sink_tokens = s;
    }
    if let Some(b) = a.buffer {
        run.buffer_tokens = b;
    }
    if let Some(f) = a.first_layer_bits {
        run.first_layer_bits = Some(f.0);
    }
    if a.with_predictors {
        run.with_predictors = true;
    }
    let g = run
        .geometry
        .ok_or_else(|| Error::Config("give --geometry or --layers/--kv-heads/--head-dim".into()))?;
    let first_layer = match run.first_layer_bits {
        None => None,
        Some(bits) => Some(
            CacheConfig {
                backbone: run.backbone,
                first_layer_bits: bits,
                ..CacheConfig::default()
            }
            .first_layer_backbone()?,
        ),
    };
    let o = OverheadSpec {
        layers: g.n_layers,
        tokens: run.tokens,
        kv_channels: g.kv_channels(),
        sink_tokens: run.sink_tokens,
        buffer_tokens: run.buffer_tokens,
        first_layer,
        predictor_params: if run.with_predictors {
            g.predictor_params()
        } else {
            0
        },
    };
    let b = effective_bits(&run.backbone, &o)?;
    let report = json!({
        "geometry": g,
        "backbone": run.backbone.label(),
        "breakdown": b,
    });
    emit(&envelope("bits", &run, report)?, None)
}

// ---------------------------------------------------------------- inspect

#[derive(Args)]
struct InspectArgs {
    path: PathBuf,
}

fn run_inspect(a: InspectArgs) -> Result<()> {
    let mut head = [0u8; 4];
    {
        use std::io::Read;
        let mut f = fs::File::open(&a.path)?;
        f.read_exact(&mut head)
            .map_err(|_| Error::Format("file is shorter than a magic number".into()))?;
    }
    let report = match &head {
        b"KVT1" => {
            let mut r = TraceReader::open(&a.path)?;
            r.verify()?;
            json!({ "format": "KVT1", "valid": true, "meta": r.meta() })
        }
        b"AQKV" => {
            let ps = PredictorSet::load(&a.path)?;
            json!({
                "format": "AQKV",
                "valid": true,
                "geometry": ps.geometry,
                "calibration": ps.meta,
                "parameters": ps.n_params(),
            })
        }
        b"AQKC" => {
            let bytes = fs::read(&a.path)?;
            let header = cache_header_json(&bytes)?;
            wire::split_checksum(&bytes)?;
            json!({ "format": "AQKC", "valid": true, "header": header })
        }
        other => return Err(Error::Format(format!("unrecognized magic {other:?}"))),
    };
    let bytes = fs::metadata(&a.path)?.len();
    let mut report = report;
    report["bytes"] = json!(bytes);
    report["schema_version"] = json!(SCHEMA_VERSION);
    emit(&report, None)
}

// ---------------------------------------------------------------- main

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_)
        | Error::Shape(_)
        | Error::Singular { .. }
        | Error::DegenerateTarget
        | Error::OutOfRange(_) => 3,
        Error::Io(_) => 4,
        Error::Format(_)
        | Error::Truncated { .. }
        | Error::Checksum { .. }
        | Error::NonFinite { .. }
        | Error::Json(_) => 5,
        Error::Incompatible(_) => 6,
        Error::Contract(_) => 1,
    }
}

fn error_line(kind: &str, message: &str, code: u8) -> String {
    json!({ "error": kind, "message": message, "exit_code": code }).to_string()
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v.parse().ok().filter(|&n| n > 0).ok_or_else(|| {
            Error::Config(format!(
                "{THREADS_ENV} must be a positive integer, got {v:?}"
            ))
        })?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Synth(a) => run_synth(a),
        Command::Probe(a) => run_probe(a),
        Command::Calibrate(a) => run_calibrate(a),
        Command::Replay(a) => run_replay(a),
        Command::Bits(a) => run_bits(a),
        Command::Inspect(a) => run_inspect(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            if !e.use_stderr() {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let msg = e.render().to_string();
            eprint!("{msg}");
            eprintln!(
                "{}",
                error_line("usage", msg.lines().next().unwrap_or(""), 2)
            );
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code(&e);
            eprintln!("{}", error_line(e.kind(), &e.to_string(), code));
            ExitCode::from(code)
        }
    }
}
