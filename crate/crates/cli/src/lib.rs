//! Command-line front end: scenario files, single runs, the side-by-side
//! results table and randomized sweeps.

pub mod commands;
pub mod error;
pub mod output;
pub mod scenario_file;

pub use error::CliError;
