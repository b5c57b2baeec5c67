//! Library surface behind the `pdx` binary: checkpoint format, run
//! configuration, manifests, and the subcommand implementations. Split out so
//! integration tests can drive the same code paths the binary uses.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;
