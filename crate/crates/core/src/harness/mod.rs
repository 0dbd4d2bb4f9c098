//! Synthetic experiments: instance generation, metrics, sweeps and output.

pub mod config;
pub mod instance;
pub mod metrics;
pub mod sweep;
