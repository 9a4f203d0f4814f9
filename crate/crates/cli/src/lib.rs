//! Library side of the `agentinfer` binary: config resolution, the run and
//! automaton commands, and the acceptance checks behind `verify`.

pub mod commands;
pub mod error;
pub mod keys;
pub mod settings;
pub mod verify;

pub use error::CliError;

/// Environment variable naming the default report directory.
pub const OUT_DIR_ENV: &str = "AGENTINFER_OUT_DIR";
