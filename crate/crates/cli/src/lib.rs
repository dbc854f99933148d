//! File formats and the `ditune` command-line driver.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod run;

pub use error::{CliError, Result};
pub use run::dispatch;
