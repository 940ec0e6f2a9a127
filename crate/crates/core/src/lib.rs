//! End-to-end simultaneous speech translation.
//!
//! A unidirectional Conv-Transformer acoustic encoder with gradual
//! downsampling, a blank-limited CTC head, weighted shrinking of CTC
//! segments, a causal semantic encoder and a Wait-K-Stride-N decoder,
//! together with the streaming engine, latency metrics and training loops
//! needed to run them on synthetic or imported features.

pub mod cli;
pub mod config;
pub mod ctc;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod shrink;
pub mod simul;
pub mod train;

pub use error::{Error, Result};
