//! Experiment configuration and runner for the `uavnet` binary.

pub mod config;
pub mod runner;

pub use config::{parse_config, ConfigError, ExperimentConfig, ExperimentKind};
pub use runner::{run_experiment, run_seed, threads_from_env, RunError, RunReport, SeedOutput};
