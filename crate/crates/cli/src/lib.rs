//! Workbench driver: configuration, the stage store, the pipeline, sweeps
//! and report rendering behind the `ffkv` binary.

pub mod commands;
pub mod config;
pub mod error;
pub mod evaluate;
pub mod pipeline;
pub mod report;
pub mod store;
pub mod sweep;

pub use config::WorkbenchConfig;
pub use error::{CliError, Result};
