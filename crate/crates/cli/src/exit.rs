//! Exit status contract: 0 success, 2 config error, 3 shape error,
//! 4 check failure, 1 anything else.

use std::fmt;

use ulike_core::Error;

pub const CONFIG: i32 = 2;
pub const SHAPE: i32 = 3;
pub const CHECK: i32 = 4;
pub const OTHER: i32 = 1;

#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

/// A check ran and did not pass.
#[derive(Debug)]
pub struct CheckFailed(pub String);

impl fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "check failed: {}", self.0)
    }
}

impl std::error::Error for CheckFailed {}

pub fn code(e: &anyhow::Error) -> i32 {
    if e.downcast_ref::<ConfigError>().is_some() {
        return CONFIG;
    }
    if e.downcast_ref::<CheckFailed>().is_some() {
        return CHECK;
    }
    match e.downcast_ref::<Error>() {
        Some(Error::Config(_)) => CONFIG,
        Some(Error::Divisibility { .. } | Error::Shape { .. } | Error::Dim { .. } | Error::AttentionMemory { .. }) => {
            SHAPE
        }
        _ => OTHER,
    }
}
