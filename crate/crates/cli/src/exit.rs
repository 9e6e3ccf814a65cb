//! Exit codes: 0 success, 1 check failure, 2 usage or configuration error,
//! 3 I/O error.

use std::fmt;

use msatr_core::Error;

pub const OK: u8 = 0;
pub const CHECK_FAILED: u8 = 1;
pub const USAGE: u8 = 2;
pub const IO: u8 = 3;

/// Bad flags, config keys or values.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// A verification step ran to completion and reported failures.
#[derive(Debug)]
pub struct CheckFailure(pub String);

impl fmt::Display for CheckFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CheckFailure {}

pub fn core_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } | Error::Decode(_) | Error::Checkpoint { .. } => IO,
        Error::Config(_) | Error::Dataset(_) | Error::Contract(_) | Error::Partition { .. } => USAGE,
        Error::Dimension { .. } | Error::Domain { .. } | Error::Divergence { .. } => CHECK_FAILED,
    }
}

/// Classifies by the first recognised error in the chain.
pub fn code_for(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return USAGE;
        }
        if cause.is::<CheckFailure>() {
            return CHECK_FAILED;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return core_code(e);
        }
        if cause.is::<std::io::Error>() {
            return IO;
        }
    }
    CHECK_FAILED
}
