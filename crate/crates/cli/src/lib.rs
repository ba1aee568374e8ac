//! Command-line harness: simulation, fitting, prediction and the two
//! evaluation studies, with deterministic CSV/JSON outputs.

pub mod args;
pub mod commands;
pub mod experiments;
pub mod stats;

use std::fmt;

/// A bad flag combination or setting detected after argument parsing.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

/// Exit code for a failed run: 2 usage, 3 data, 4 numerical failure.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return EXIT_USAGE;
        }
        if let Some(e) = cause.downcast_ref::<mgcp_core::Error>() {
            return match e {
                mgcp_core::Error::InvalidArgument(_) => EXIT_USAGE,
                e if e.is_numerical() => EXIT_NUMERICAL,
                _ => EXIT_DATA,
            };
        }
    }
    EXIT_DATA
}
