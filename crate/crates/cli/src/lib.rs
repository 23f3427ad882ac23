//! Command line and HTTP front ends for `meltpool-core`.

pub mod commands;
pub mod server;
