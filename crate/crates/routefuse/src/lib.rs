//! File formats, configuration loading and the command implementations
//! behind the `routefuse` binary.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod vocab;

pub use config::Config;
