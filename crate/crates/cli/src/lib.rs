//! Command-line front end and HTTP grading service for `stylemap` models.

pub mod commands;
pub mod service;

use std::fmt;

/// Exit status for unusable inputs (missing directories, unreadable files,
/// malformed arguments).
pub const EXIT_INPUT: u8 = 2;
/// Exit status for failures while running a command.
pub const EXIT_FAILURE: u8 = 1;

/// An error caused by the user's inputs rather than by the computation.
#[derive(Debug)]
pub struct InputError(pub String);

impl fmt::Display for InputError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InputError {}

/// Maps an error to the process exit status.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<InputError>().is_some() {
        EXIT_INPUT
    } else {
        EXIT_FAILURE
    }
}
