//! File formats, reports and the `ptp` command line around `ptp-core`.

pub mod checkpoint;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod report;
pub mod runner;
pub mod store;

pub use error::CliError;
