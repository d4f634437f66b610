//! File formats and commands behind the `dfpq` binary.

pub mod commands;
pub mod container;
pub mod dataset;
