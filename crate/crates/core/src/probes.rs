//! Linear dependency probes between cache entries.
//!
//! A probe fits a ridge map from a source (earlier layer, earlier token, the
//! other role, or a concatenation of those) to the keys or values of a layer
//! and reports the explained variance on held-out sequences. Probes read
//! ground-truth inputs, so their EVR is an upper bound on what a deployed
//! predictor sees with reconstructed inputs.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::linalg::{explained_variance_ratio_with, ridge_fit, EvrAggregation, Matrix};
use crate::report::SCHEMA_VERSION;
use crate::trace_io::KVTrace;

/// Reference EVR of 1-bit and 2-bit quantizers on Gaussian data.
pub const REFERENCE_LINES: [f64; 2] = [0.75, 0.89];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Keys,
    Values,
}

impl Role {
    pub fn other(self) -> Role {
        match self {
            Role::Keys => Role::Values,
            Role::Values => Role::Keys,
        }
    }

    fn of(self, trace: &KVTrace, layer: usize) -> &Matrix {
        match self {
            Role::Keys => &trace.keys[layer],
            Role::Values => &trace.values[layer],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum ProbeSource {
    /// Same role and token, `k` layers earlier.
    PrevLayer(usize),
    /// Same role and layer, `k` tokens earlier in the same sequence.
    PrevToken(usize),
    /// The other role at the same layer and token.
    CrossRole,
    /// The target itself.
    Itself,
    /// Concatenation of the parts, in order.
    Combination(Vec<ProbeSource>),
}

impl ProbeSource {
    fn atoms(&self) -> Vec<&ProbeSource> {
        match self {
            ProbeSource::Combination(parts) => parts.iter().flat_map(|p| p.atoms()).collect(),
            other => vec![other],
        }
    }

    /// Earliest layer for which every part exists.
    fn min_layer(&self) -> usize {
        self.atoms()
            .iter()
            .map(|a| {
                if let ProbeSource::PrevLayer(k) = a {
                    *k
                } else {
                    0
                }
            })
            .max()
            .unwrap_or(0)
    }

    /// Number of leading tokens per sequence that have no source.
    fn token_lag(&self) -> usize {
        self.atoms()
            .iter()
            .map(|a| {
                if let ProbeSource::PrevToken(k) = a {
                    *k
                } else {
                    0
                }
            })
            .max()
            .unwrap_or(0)
    }
}

impl fmt::Display for ProbeSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProbeSource::PrevLayer(k) => write!(f, "prevL{k}"),
            ProbeSource::PrevToken(k) => write!(f, "prevT{k}"),
            ProbeSource::CrossRole => f.write_str("crossrole"),
            ProbeSource::Itself => f.write_str("self"),
            ProbeSource::Combination(parts) => {
                for (i, p) in parts.iter().enumerate() {
                    if i > 0 {
                        f.write_str("+")?;
                    }
                    write!(f, "{p}")?;
                }
                Ok(())
            }
        }
    }
}

impl FromStr for ProbeSource {
    type Err = Error;

    /// Parses `prevL1`, `prevT2`, `crossrole`, `self`, or `+`-joined combinations.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.contains('+') {
            let parts = s.split('+').map(str::parse).collect::<Result<Vec<_>>>()?;
            return Ok(ProbeSource::Combination(parts));
        }
        let lag = |rest: &str| -> Result<usize> {
            match rest.parse::<usize>() {
                Ok(k) if k >= 1 => Ok(k),
                _ => config_err(format!("bad probe lag in {s:?}")),
            }
        };
        if let Some(rest) = s.strip_prefix("prevL") {
            Ok(ProbeSource::PrevLayer(lag(rest)?))
        } else if let Some(rest) = s.strip_prefix("prevT") {
            Ok(ProbeSource::PrevToken(lag(rest)?))
        } else if s.eq_ignore_ascii_case("crossrole") {
            Ok(ProbeSource::CrossRole)
        } else if s == "self" {
            Ok(ProbeSource::Itself)
        } else {
            config_err(format!("unknown probe source {s:?}"))
        }
    }
}

impl Serialize for ProbeSource {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ProbeSource {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

pub fn parse_sources(list: &str) -> Result<Vec<ProbeSource>> {
    list.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(str::parse)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub lambda: f64,
    /// Trailing sequences held out; `None` holds out one in eight (at least one).
    pub holdout_sequences: Option<usize>,
    /// Leading tokens of every sequence left out of fitting and scoring.
    pub skip_tokens: usize,
    pub aggregation: EvrAggregation,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            lambda: 1e-3,
            holdout_sequences: None,
            skip_tokens: 4,
            aggregation: EvrAggregation::Pooled,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeEntry {
    pub target: Role,
    pub source: ProbeSource,
    pub layer: usize,
    pub train_evr: f64,
    pub holdout_evr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeMean {
    pub target: Role,
    pub source: ProbeSource,
    pub layers: usize,
    pub mean_train_evr: f64,
    pub mean_holdout_evr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub schema_version: u32,
    pub kind: String,
    pub config: ProbeConfig,
    pub train_sequences: Vec<usize>,
    pub holdout_sequences: Vec<usize>,
    pub reference_lines: Vec<f64>,
    pub entries: Vec<ProbeEntry>,
    pub means: Vec<ProbeMean>,
    pub notes: Vec<String>,
}

impl ProbeReport {
    pub fn mean(&self, target: Role, source: &ProbeSource) -> Option<f64> {
        self.means
            .iter()
            .find(|m| m.target == target && &m.source == source)
            .map(|m| m.mean_holdout_evr)
    }

    /// One row per entry: `target,source,layer,train_evr,holdout_evr`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("target,source,layer,train_evr,holdout_evr\n");
        for e in &self.entries {
            let role = match e.target {
                Role::Keys => "keys",
                Role::Values => "values",
            };
            out.push_str(&format!(
                "{role},{},{},{:.6},{:.6}\n",
                e.source, e.layer, e.train_evr, e.holdout_evr
            ));
        }
        out
    }
}

/// Splits sequences into train and holdout (trailing) sets.
pub fn split_sequences(n: usize, holdout: Option<usize>) -> Result<(Vec<usize>, Vec<usize>)> {
    let h = holdout.unwrap_or((n / 8).max(1));
    if n < 2 || h == 0 || h >= n {
        return config_err(format!(
            "need at least one train and one holdout sequence ({n} sequences, {h} held out)"
        ));
    }
    Ok(((0..n - h).collect(), (n - h..n).collect()))
}

/// Token rows of `seqs`, skipping the first `first` positions of each.
fn usable_rows(trace: &KVTrace, seqs: &[usize], first: usize) -> Vec<usize> {
    let ranges = trace.meta.sequence_ranges();
    seqs.iter()
        .flat_map(|&s| (ranges[s].start + first).min(ranges[s].end)..ranges[s].end)
        .collect()
}

fn source_matrix(
    trace: &KVTrace,
    source: &ProbeSource,
    target: Role,
    layer: usize,
    rows: &[usize],
) -> Matrix {
    let parts: Vec<Matrix> = source
        .atoms()
        .into_iter()
        .map(|a| match a {
            ProbeSource::PrevLayer(k) => target.of(trace, layer - k).gather_rows(rows),
            ProbeSource::PrevToken(k) => {
                let shifted: Vec<usize> = rows.iter().map(|r| r - k).collect();
                target.of(trace, layer).gather_rows(&shifted)
            }
            ProbeSource::CrossRole => target.other().of(trace, layer).gather_rows(rows),
            ProbeSource::Itself => target.of(trace, layer).gather_rows(rows),
            ProbeSource::Combination(_) => unreachable!("atoms are flattened"),
        })
        .collect();
    let refs: Vec<&Matrix> = parts.iter().collect();
    Matrix::hstack(&refs).expect("parts share row count")
}

fn probe_one(
    trace: &KVTrace,
    target: Role,
    source: &ProbeSource,
    layer: usize,
    train: &[usize],
    hold: &[usize],
    cfg: &ProbeConfig,
) -> Result<ProbeEntry> {
    let y_train = target.of(trace, layer).gather_rows(train);
    let y_hold = target.of(trace, layer).gather_rows(hold);
    let x_train = source_matrix(trace, source, target, layer, train);
    let x_hold = source_matrix(trace, source, target, layer, hold);
    let map = ridge_fit(&x_train, &y_train, cfg.lambda)?;
    let train_evr =
        explained_variance_ratio_with(&y_train, &map.apply(&x_train)?, cfg.aggregation)?;
    let holdout_evr =
        explained_variance_ratio_with(&y_hold, &map.apply(&x_hold)?, cfg.aggregation)?;
    Ok(ProbeEntry {
        target,
        source: source.clone(),
        layer,
        train_evr,
        holdout_evr,
    })
}

/// Fits every `(target, source, layer)` probe and reports holdout EVR per
/// layer and averaged over layers.
pub fn probe_matrix(
    trace: &KVTrace,
    targets: &[Role],
    sources: &[ProbeSource],
    cfg: &ProbeConfig,
) -> Result<ProbeReport> {
    trace.validate()?;
    if !(cfg.lambda >= 0.0) {
        return config_err("lambda must be >= 0");
    }
    let (train_seqs, hold_seqs) = split_sequences(trace.meta.n_sequences, cfg.holdout_sequences)?;
    let n_layers = trace.meta.n_layers;
    let mut notes = Vec::new();
    let mut jobs = Vec::new();
    for &target in targets {
        for source in sources {
            let first = source.min_layer();
            if first >= n_layers {
                notes.push(format!(
                    "{source} for {target:?} skipped: needs more than {n_layers} layers"
                ));
                continue;
            }
            if first > 0 {
                notes.push(format!(
                    "{source} for {target:?}: layers below {first} have no source"
                ));
            }
            for layer in first..n_layers {
                jobs.push((target, source, layer));
            }
        }
    }
    let entries = jobs
        .par_iter()
        .map(|&(target, source, layer)| {
            let first = cfg.skip_tokens.max(source.token_lag());
            let train = usable_rows(trace, &train_seqs, first);
            let hold = usable_rows(trace, &hold_seqs, first);
            if train.len() < 2 || hold.len() < 2 {
                return config_err(format!(
                    "{source}: too few tokens after dropping {first} per sequence"
                ));
            }
            probe_one(trace, target, source, layer, &train, &hold, cfg)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut means = Vec::new();
    for &target in targets {
        for source in sources {
            let picked: Vec<&ProbeEntry> = entries
                .iter()
                .filter(|e| e.target == target && &e.source == source)
                .collect();
            if picked.is_empty() {
                continue;
            }
            let n = picked.len() as f64;
            means.push(ProbeMean {
                target,
                source: source.clone(),
                layers: picked.len(),
                mean_train_evr: picked.iter().map(|e| e.train_evr).sum::<f64>() / n,
                mean_holdout_evr: picked.iter().map(|e| e.holdout_evr).sum::<f64>() / n,
            });
        }
    }
    Ok(ProbeReport {
        schema_version: SCHEMA_VERSION,
        kind: "probe".into(),
        config: cfg.clone(),
        train_sequences: train_seqs,
        holdout_sequences: hold_seqs,
        reference_lines: REFERENCE_LINES.to_vec(),
        entries,
        means,
        notes,
    })
}
