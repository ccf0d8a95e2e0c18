//! File formats, checkpoints, run configuration and the command-line tool
//! around `livematch-core`.

pub mod checkpoint;
pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
pub mod formats;
pub mod report;

pub use error::{Error, Result};
