//! Hexagonal micro-region context and probabilistic service-time models for
//! last-mile delivery.

// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod boosting;
pub mod cli;
pub mod cluster;
pub mod conformal;
pub mod dist;
pub mod embed;
pub mod error;
pub mod eval;
pub mod geo;
pub mod ingest;
pub mod metrics;
pub mod special;

pub use dist::PredictiveDistribution;
pub use error::{Error, Result};
