//! Library surface of the CLI: configuration loading and the subcommand
//! implementations, kept separate from argument parsing so integration
//! tests can drive them directly.

pub mod commands;
pub mod config;
