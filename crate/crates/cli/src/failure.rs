//! Command failures, their exit codes and the JSON written to stderr.

use std::fmt;
use std::path::Path;

use mrnorm::ErrorKind;
use serde::Serialize;

#[derive(Debug)]
pub struct Failure {
    pub kind: ErrorKind,
    pub message: String,
}

impl Failure {
    pub fn contract(message: impl Into<String>) -> Self {
        Failure {
            kind: ErrorKind::Contract,
            message: message.into(),
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        Failure {
            kind: ErrorKind::Io,
            message: format!("{}: {e}", path.display()),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind {
            ErrorKind::Contract => 2,
            ErrorKind::Numerical => 3,
            ErrorKind::Io => 4,
        }
    }

    fn kind_name(&self) -> &'static str {
        match self.kind {
            ErrorKind::Contract => "contract",
            ErrorKind::Numerical => "numerical",
            ErrorKind::Io => "io",
        }
    }

    /// One-line JSON object, e.g.
    /// `{"error":{"kind":"io","exit_code":4,"message":"..."}}`.
    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Body<'a> {
            kind: &'a str,
            exit_code: i32,
            message: &'a str,
        }
        #[derive(Serialize)]
        struct Wrapper<'a> {
            error: Body<'a>,
        }
        serde_json::to_string(&Wrapper {
            error: Body {
                kind: self.kind_name(),
                exit_code: self.exit_code(),
                message: &self.message,
            },
        })
        .expect("error json")
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<mrnorm::Error> for Failure {
    fn from(e: mrnorm::Error) -> Self {
        Failure {
            kind: e.kind(),
            message: e.to_string(),
        }
    }
}
