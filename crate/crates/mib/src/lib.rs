//! Files, configs and the command line around `mib-core`.
//!
//! The core crate holds the losses, model and training loops; this crate
//! adds everything that needs `std`: JSON experiment configs, the dataset
//! and checkpoint directories, a threaded executor, metric records and the
//! reproduction suites behind `mib reproduce`.

pub mod commands;
pub mod config;
pub mod error;
pub mod exec;
pub mod formats;
pub mod pipeline;
pub mod records;
pub mod reproduce;
pub mod store;

pub use config::ExperimentConfig;
pub use error::{CliError, Result};
