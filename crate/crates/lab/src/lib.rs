//! Experiment harness around `disc-core`: configuration, file formats,
//! single runs, sweeps and reports.

pub mod aggregate;
pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
pub mod io;
pub mod run;

pub use config::ExperimentConfig;
pub use error::LabError;
