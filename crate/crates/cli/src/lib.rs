//! Command-line front end: configuration merging and the `generate`,
//! `train`, `eval` and `sweep` verbs.

pub mod commands;
pub mod config;

pub use commands::{exit_code, Axis};
pub use config::RunConfig;
