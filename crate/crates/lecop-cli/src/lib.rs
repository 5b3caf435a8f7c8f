//! Pipeline driver: a clap command surface, a TOML run configuration, and
//! the subcommand implementations that wire the library stages end to end.

pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
