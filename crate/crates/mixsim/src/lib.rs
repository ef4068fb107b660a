//! IO companion to `mixsim-core`: experiment configuration files, the
//! line-oriented trace format, and JSON report serialization. The binary in
//! `main.rs` wires these into the `gen-trace` / `simulate` / `sweep` /
//! `report` subcommands.

pub mod config;
pub mod report;
pub mod tracefile;
