//! Deterministic simulator for federated learning with non-uniform,
//! probabilistic client participation.
//!
//! Agents run either variance-reduced (SVRG) or plain SGD local updates and
//! the server combines their parameter deltas with inverse-probability
//! weights. The [`harness`] module drives Monte Carlo batches of training
//! runs and writes plot-ready CSV and JSON summaries.

pub mod error;
pub mod federation;
pub mod harness;
pub mod localsolver;
pub mod lossmodel;
pub mod metrics;
pub mod rng;

pub use error::{Error, Result};
pub use lossmodel::{AgentShard, Dataset, LossModel, Weights};
