//! Configuration loading, command dispatch and report/CSV emission for the
//! `aiss` tool.

// `!(a < b)` is used on purpose so that NaN fails the test.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod output;
pub mod run;

pub use config::{load_config, parse_config, Config, Format};
pub use error::CliError;
pub use run::{run, Command, Outcome};

/// Environment variable selecting the log filter.
pub const LOG_ENV: &str = "AISS_LOG";
