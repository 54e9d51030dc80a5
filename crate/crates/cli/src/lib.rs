//! Experiment runner for the semwave link simulator: configuration files,
//! grid evaluation and the `semwave` subcommands.

pub mod commands;
pub mod config;
pub mod pool;
