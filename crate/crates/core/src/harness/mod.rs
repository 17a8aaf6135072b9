//! Experiment orchestration: datasets, configuration, attack runs and reports.

pub mod config;
pub mod dataset;
pub mod experiment;

pub use config::{ExperimentConfig, Method, Mode};
pub use dataset::DatasetSpec;
pub use experiment::{phi_grid_search, pretrain_policy, run_experiment, ExperimentOutcome, RunRecord};
