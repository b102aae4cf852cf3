//! Library side of the `safn` command-line tool: configuration handling,
//! output layouts and the subcommand implementations.

pub mod commands;
pub mod config;
pub mod output;

use std::fmt;

/// Bad flags, bad config files or invalid settings.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// Process exit code for a failed command. Anything not recognised as a
/// usage or numeric failure counts as a data error.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return EXIT_USAGE;
        }
        if let Some(e) = cause.downcast_ref::<safn_core::Error>() {
            return match e.kind() {
                safn_core::ErrorKind::Usage => EXIT_USAGE,
                safn_core::ErrorKind::Data => EXIT_DATA,
                safn_core::ErrorKind::Numeric => EXIT_NUMERIC,
            };
        }
    }
    EXIT_DATA
}
