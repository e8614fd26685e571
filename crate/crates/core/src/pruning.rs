//! Heavy-hitter token selection from accumulated attention, and its
//! composition with the compressed cache.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::kvcache::{replay_trace, ReplayConfig, ReplayReport};
use crate::predictor::PredictorSet;
use crate::report::SCHEMA_VERSION;
use crate::trace_io::{AttentionStats, KVTrace, TraceMeta};

const CEIL_EPS: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PruneConfig {
    /// Fraction of each sequence's tokens to keep.
    pub budget: f64,
    /// Fraction kept as the most recent tokens; `None` is half the budget.
    pub recent: Option<f64>,
    /// Leading tokens always kept (counted inside the budget).
    pub sink_tokens: usize,
    /// One kept set for all layers, chosen from scores summed over layers.
    pub shared: bool,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            budget: 0.2,
            recent: None,
            sink_tokens: 4,
            shared: false,
        }
    }
}

impl PruneConfig {
    pub fn recent_fraction(&self) -> f64 {
        self.recent.unwrap_or(0.5 * self.budget)
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.recent_fraction();
        if !(self.budget > 0.0 && self.budget <= 1.0) {
            return config_err(format!(
                "prune budget must be in (0, 1], got {}",
                self.budget
            ));
        }
        if !(r >= 0.0 && r <= self.budget) {
            return config_err(format!(
                "recent fraction {r} must be in [0, budget {}]",
                self.budget
            ));
        }
        Ok(())
    }
}

/// `⌈f · n⌉`, ignoring floating-point excess such as `0.2 · 10 = 2.0000000000000004`.
pub fn fraction_count(f: f64, n: usize) -> usize {
    ((f * n as f64 - CEIL_EPS).ceil().max(0.0) as usize).min(n)
}

/// Kept positions (sorted) of one sequence with per-token `scores`: the first
/// `sinks`, the newest `⌈recent·T⌉`, then the highest-scoring others (lower
/// index first on ties) up to `⌈budget·T⌉` in total.
pub fn h2o_select_scores(
    scores: &[f32],
    budget: f64,
    recent: f64,
    sinks: usize,
) -> Result<Vec<usize>> {
    let t = scores.len();
    let n_budget = fraction_count(budget, t);
    let n_recent = fraction_count(recent, t);
    let s = sinks.min(t);
    let mut keep = vec![false; t];
    keep[..s].iter_mut().for_each(|k| *k = true);
    keep[t - n_recent..].iter_mut().for_each(|k| *k = true);
    let fixed = keep.iter().filter(|&&k| k).count();
    if fixed > n_budget {
        return config_err(format!(
            "budget of {n_budget} tokens is smaller than {s} sinks plus {n_recent} recent tokens"
        ));
    }
    let mut rest: Vec<usize> = (0..t).filter(|&i| !keep[i]).collect();
    rest.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    for &i in rest.iter().take(n_budget - fixed) {
        keep[i] = true;
    }
    Ok((0..t).filter(|&i| keep[i]).collect())
}

/// Kept global token rows per layer. In shared mode every layer gets the
/// same rows.
pub fn h2o_select(
    stats: &AttentionStats,
    meta: &TraceMeta,
    cfg: &PruneConfig,
) -> Result<Vec<Vec<usize>>> {
    cfg.validate()?;
    stats.validate(meta.n_layers, meta.n_tokens)?;
    let select = |scores: &[f32]| -> Result<Vec<usize>> {
        let mut rows = Vec::new();
        for r in meta.sequence_ranges() {
            let kept = h2o_select_scores(
                &scores[r.clone()],
                cfg.budget,
                cfg.recent_fraction(),
                cfg.sink_tokens,
            )?;
            rows.extend(kept.into_iter().map(|p| r.start + p));
        }
        Ok(rows)
    };
    if cfg.shared {
        let mut total = vec![0f32; meta.n_tokens];
        for layer in &stats.scores {
            total.iter_mut().zip(layer).for_each(|(t, s)| *t += s);
        }
        let rows = select(&total)?;
        Ok(vec![rows; meta.n_layers])
    } else {
        stats.scores.iter().map(|s| select(s)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub schema_version: u32,
    pub kind: String,
    pub prune: PruneConfig,
    pub original_tokens: usize,
    pub kept_tokens: usize,
    pub kept_per_sequence: Vec<usize>,
    /// Reconstruction quality on the kept tokens.
    pub replay: ReplayReport,
    /// Stored bits (cache and predictors) per value of the unpruned cache.
    pub combined_bits_per_value: f64,
    pub notes: Vec<String>,
}

/// Keeps the heavy hitters of every sequence, then compresses what is left.
/// Cross-layer prediction needs the same tokens in every layer, so the kept
/// set is always the shared one.
pub fn prune_then_compress(
    trace: &KVTrace,
    predictors: Option<Arc<PredictorSet>>,
    prune: &PruneConfig,
    cfg: &ReplayConfig,
) -> Result<PruneReport> {
    let stats = trace
        .stats
        .as_ref()
        .ok_or_else(|| Error::Config("pruning needs a trace with attention stats".into()))?;
    let mut notes = Vec::new();
    if !prune.shared {
        notes.push("per-layer selection replaced by the shared set so layers stay aligned".into());
    }
    let shared = PruneConfig {
        shared: true,
        ..prune.clone()
    };
    let rows = h2o_select(stats, &trace.meta, &shared)?.swap_remove(0);
    let kept_per_sequence: Vec<usize> = trace
        .meta
        .sequence_ranges()
        .iter()
        .map(|r| rows.iter().filter(|&&x| r.contains(&x)).count())
        .collect();
    let pruned = trace.select_tokens(&rows, kept_per_sequence.clone())?;
    let replay = replay_trace(&pruned, predictors, cfg)?;
    let combined =
        replay.measured_bits_per_value * pruned.meta.n_tokens as f64 / trace.meta.n_tokens as f64;
    Ok(PruneReport {
        schema_version: SCHEMA_VERSION,
        kind: "prune_replay".into(),
        prune: shared,
        original_tokens: trace.meta.n_tokens,
        kept_tokens: rows.len(),
        kept_per_sequence,
        replay,
        combined_bits_per_value: combined,
        notes,
    })
}
