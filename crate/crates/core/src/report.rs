//! Shared pieces of the JSON reports: schema version, timing, and streaming
//! error statistics.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::linalg::{evr_from_variances, EvrAggregation};

/// Bumped on any breaking change to report layout.
pub const SCHEMA_VERSION: u32 = 1;

/// Wall-clock measurements. Kept apart from the deterministic report body.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub seconds: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub encode_values_per_second: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub decode_values_per_second: Option<f64>,
}

/// Per-channel first and second moments of a target and of an error,
/// accumulated row by row.
#[derive(Clone, Debug, Default)]
pub struct ErrorStats {
    rows: u64,
    target_sum: Vec<f64>,
    target_sq: Vec<f64>,
    err_sum: Vec<f64>,
    err_sq: Vec<f64>,
    max_abs: f64,
}

impl ErrorStats {
    pub fn new(channels: usize) -> Self {
        Self {
            rows: 0,
            target_sum: vec![0.0; channels],
            target_sq: vec![0.0; channels],
            err_sum: vec![0.0; channels],
            err_sq: vec![0.0; channels],
            max_abs: 0.0,
        }
    }

    /// Adds one row of ground truth and its approximation.
    pub fn add_row(&mut self, target: &[f32], approx: &[f32]) {
        self.rows += 1;
        for (j, (&y, &a)) in target.iter().zip(approx).enumerate() {
            let (y, e) = (y as f64, y as f64 - a as f64);
            self.target_sum[j] += y;
            self.target_sq[j] += y * y;
            self.err_sum[j] += e;
            self.err_sq[j] += e * e;
            self.max_abs = self.max_abs.max(e.abs());
        }
    }

    pub fn merge(&mut self, other: &ErrorStats) {
        self.rows += other.rows;
        for (a, b) in [
            (&mut self.target_sum, &other.target_sum),
            (&mut self.target_sq, &other.target_sq),
            (&mut self.err_sum, &other.err_sum),
            (&mut self.err_sq, &other.err_sq),
        ] {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        self.max_abs = self.max_abs.max(other.max_abs);
    }

    pub fn rows(&self) -> u64 {
        self.rows
    }

    fn variances(&self, sum: &[f64], sq: &[f64]) -> Vec<f64> {
        let n = self.rows.max(1) as f64;
        sum.iter()
            .zip(sq)
            .map(|(&s, &q)| {
                let m = s / n;
                (q / n - m * m).max(0.0)
            })
            .collect()
    }

    /// Per-channel population variances of the target and of the error.
    pub fn variance_parts(&self) -> (Vec<f64>, Vec<f64>) {
        (
            self.variances(&self.target_sum, &self.target_sq),
            self.variances(&self.err_sum, &self.err_sq),
        )
    }

    pub fn evr(&self, agg: EvrAggregation) -> Result<f64> {
        let (t, e) = self.variance_parts();
        evr_from_variances(&t, &e, agg)
    }

    /// Sum of squared errors over all rows and channels.
    pub fn sse(&self) -> f64 {
        self.err_sq.iter().sum()
    }

    pub fn mse(&self) -> f64 {
        let total = self.rows as f64 * self.err_sq.len() as f64;
        if total == 0.0 {
            return 0.0;
        }
        self.err_sq.iter().sum::<f64>() / total
    }

    pub fn max_abs(&self) -> f64 {
        self.max_abs
    }

    /// EVR, MSE and max error, or `None` if fewer than two rows were seen.
    pub fn summary(&self, agg: EvrAggregation) -> Option<ErrorSummary> {
        if self.rows < 2 {
            return None;
        }
        Some(ErrorSummary {
            rows: self.rows,
            evr: self.evr(agg).ok(),
            mse: self.mse(),
            max_abs: self.max_abs,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorSummary {
    pub rows: u64,
    /// `None` when the target has no variance.
    pub evr: Option<f64>,
    pub mse: f64,
    pub max_abs: f64,
}
