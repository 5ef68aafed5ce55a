//! Experiment runner for the simulator in `ciffreeda-core`: FEDF and head
//! checkpoint files, JSON experiment configs, parallel grid execution with
//! CSV reports, and the `ciffreeda` command-line front end.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod io;
pub mod pipeline;
pub mod runner;

pub use config::ExperimentConfig;
pub use pipeline::{run_grid, GridOutcome};
pub use runner::RayonRunner;
