//! Experiment configuration, Monte Carlo execution and result files.

pub mod config;
pub mod experiment;

pub use config::{load_config, parse_config, ExperimentConfig};
pub use experiment::{
    build_problem, run_experiment, run_seeds, trace_csv, AlgorithmReport, ExperimentReport, Problem,
    RunOptions,
};
