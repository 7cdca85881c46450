//! File formats, checkpoints, run configuration, pipeline orchestration
//! and the command line on top of `plmoe-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod io;
pub mod pipeline;
pub mod tables;

pub use error::{Error, Result};
