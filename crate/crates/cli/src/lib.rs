//! Experiment orchestration for the `gprf` command-line tool.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod experiment;
pub mod pipeline;

pub use config::{ExperimentConfig, Fusion, Method, Overrides, RetrieverKind};
pub use error::CliError;
pub use experiment::{
    run_datafactory, run_experiment, DataFactoryOutput, ExperimentOutput, Manifest,
};
