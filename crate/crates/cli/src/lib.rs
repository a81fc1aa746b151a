//! Library side of the `gradsqueeze` command-line front end: config parsing,
//! batch execution, invariant checks, and report emission.

pub mod config;
pub mod presets;
pub mod runner;

/// Harness-level error, mapped onto process exit codes:
/// 0 success, 2 config error, 3 runtime/IO error, 4 checker failure.
#[derive(Debug)]
pub enum HarnessError {
    Config(String),
    Runtime(String),
    Checker(String),
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Runtime(_) => 3,
            HarnessError::Checker(_) => 4,
        }
    }
}

impl std::fmt::Display for HarnessError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            HarnessError::Config(m) => write!(f, "config error: {m}"),
            HarnessError::Runtime(m) => write!(f, "runtime error: {m}"),
            HarnessError::Checker(m) => write!(f, "checker failure: {m}"),
        }
    }
}

impl std::error::Error for HarnessError {}
