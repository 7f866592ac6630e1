//! Configuration, commands and report writers for the `gmmc` binary.

pub mod commands;
pub mod config;
pub mod report;
