//! Uncertainty-aware rebalancing for UAV safety prediction.

pub mod config;
pub mod error;
pub mod exec;
pub mod features;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod rebalance;
pub mod rng;
pub mod safety;
pub mod synthgen;
pub mod telemetry;
pub mod uncertainty;
pub mod ulnr;

pub use error::{Error, Result};
pub use exec::Exec;
