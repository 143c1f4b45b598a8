//! Decide whether datasets from different sources should be pooled before
//! fitting a linear model, and group many datasets greedily by that decision.
//!
//! The regression path compares a high-probability lower bound on the
//! variance reduction from pooling (φ) with an upper bound on the bias it
//! introduces (ψ). The classification path compares generalization bounds
//! for separate and pooled training.

pub mod bench;
pub mod classification;
pub mod cluster;
pub mod config;
pub mod criterion;
pub mod data;
pub mod error;
pub mod moments;
pub mod ols;
pub mod oracle;
pub mod rng;
pub mod tuner;

pub use error::{Error, Result};
