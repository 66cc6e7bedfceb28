//! File formats, the parallel Monte Carlo runner and the command
//! implementations behind the `drawdown` binary.
//!
//! The numerics live in [`drawdown_core`]; this crate adds IO on top of it.

pub mod commands;
pub mod error;
pub mod format;
pub mod memo;
pub mod runner;
pub mod verify;

pub use error::CliError;
