//! Command-line front end and HTTP service for the triage cascade.
//!
//! The `triage` binary is a thin wrapper over [`commands::run`]; the HTTP
//! service lives in [`server`] and the client for an external decision
//! service in [`external`].

pub mod commands;
pub mod external;
pub mod server;

use std::fmt;

/// A failure caused by bad input rather than a bug or an environment
/// problem. Maps to exit code 1.
#[derive(Debug)]
pub struct Invalid(pub String);

impl fmt::Display for Invalid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

pub fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Invalid(msg.into()).into()
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_INTERNAL: i32 = 2;

pub fn exit_code(err: &anyhow::Error) -> i32 {
    if err.chain().any(|e| e.is::<Invalid>()) {
        EXIT_INVALID
    } else {
        EXIT_INTERNAL
    }
}
