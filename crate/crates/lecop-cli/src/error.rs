//! Process-level error classification. Every failure maps to one of three
//! categories with a fixed exit code and a single-line stderr rendering.

use std::fmt;

#[derive(Debug)]
pub enum CliError {
    /// Bad invocation or configuration. Exit 1.
    Usage(String),
    /// The inputs are readable but wrong: malformed rows, missing ids,
    /// dimension mismatches. Exit 2.
    Data(String),
    /// The environment failed: I/O, network, thread pool. Exit 3.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }

    pub fn category(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Data(_) => "data",
            CliError::Runtime(_) => "runtime",
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Runtime(m) => m,
        }
    }
}

impl fmt::Display for CliError {
    /// `error: <category>: <message>` on one line; embedded newlines are
    /// flattened so the stderr line stays machine-parsable.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "error: {}: {}",
            self.category(),
            one_line(self.message())
        )
    }
}

impl std::error::Error for CliError {}

impl From<lecop::Error> for CliError {
    fn from(e: lecop::Error) -> Self {
        match &e {
            lecop::Error::Io { .. } | lecop::Error::Http { .. } => CliError::Runtime(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

/// Collapse a possibly multi-line message into one line.
pub fn one_line(msg: &str) -> String {
    msg.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .collect::<Vec<_>>()
        .join("; ")
}
