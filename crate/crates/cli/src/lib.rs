//! Experiment runner for the `kvdirect` engine.
//!
//! Every experiment takes a [`RunConfig`] and produces a [`Report`]: the
//! configuration echo, the results, and a PASS/FAIL verdict for each
//! invariant the experiment checks.

pub mod commands;
pub mod config;
pub mod prompt;
pub mod report;

pub use commands::run;
pub use config::{Experiment, FileConfig, Format, Overrides, Preset, RunConfig};
pub use report::{Report, Verdict};

/// Prefix of the environment variables that mirror the flags.
pub const ENV_PREFIX: &str = "KVDIRECT_";
