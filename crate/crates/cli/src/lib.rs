//! Experiment pipeline behind the `lssl` binary: configuration, the
//! checkpoint container, result files and the grid reproduction.

pub mod checkpoint;
pub mod checks;
pub mod commands;
pub mod config;
pub mod results;
pub mod summary;
