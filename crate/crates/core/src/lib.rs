//! KV-cache compression with cross-layer linear predictors.
//!
//! Keys and values of layer `i` are predicted from the reconstructed cache of
//! layer `i − 1` (and, for values, from the reconstructed keys of layer `i`);
//! only the prediction residual is stored, quantized by a pluggable backbone.

pub mod calibration;
pub mod error;
pub mod kvcache;
pub mod linalg;
pub mod predictor;
pub mod probes;
pub mod pruning;
pub mod quantizer;
pub mod report;
pub mod rng;
pub mod trace_io;
pub mod wire;

pub use error::{Error, Result};
pub use linalg::{LinearMap, Matrix};
