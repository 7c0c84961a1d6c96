//! Synthetic data, training, evaluation and self-checks.

pub mod ablation;
pub mod checks;
pub mod config;
pub mod dataset;
pub mod eval;
pub mod metrics;
pub mod synth;
pub mod train;
