//! Command-line front end for the `convqa` pipeline.

pub mod commands;
pub mod config;
pub mod data;
pub mod session;

use std::fmt;

/// A CLI-level failure with a stable kind for the one-line error format.
#[derive(Debug)]
pub struct Failure {
    pub kind: &'static str,
    pub message: String,
}

impl Failure {
    pub fn new(kind: &'static str, message: impl Into<String>) -> Self {
        Self {
            kind,
            message: message.into(),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Failure {}

/// `error: <kind>: <message>` on a single line.
pub fn error_line(err: &anyhow::Error) -> String {
    let kind = err
        .chain()
        .find_map(|e| {
            e.downcast_ref::<Failure>()
                .map(|f| f.kind)
                .or_else(|| e.downcast_ref::<convqa::Error>().map(convqa::Error::kind))
        })
        .unwrap_or("internal");
    let message = err.chain().map(|e| e.to_string()).collect::<Vec<_>>().join(": ");
    format!("error: {kind}: {}", message.replace('\n', " "))
}
