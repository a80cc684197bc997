//! File formats, cost reports and the command-line driver for the MOAT
//! model family. The algorithms live in `moat-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod report;

pub use error::{Error, Result};
