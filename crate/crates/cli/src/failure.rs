use kpz_core::{Error, ErrorClass};

/// An error with the process exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    pub const CONFIG: i32 = 2;
    pub const INVARIANT: i32 = 3;
    pub const NUMERIC: i32 = 4;

    pub fn config(message: impl Into<String>) -> Self {
        Self { code: Self::CONFIG, message: message.into() }
    }

    pub fn invariant(message: impl Into<String>) -> Self {
        Self { code: Self::INVARIANT, message: message.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e.class() {
            ErrorClass::Config => Self::CONFIG,
            ErrorClass::Invariant => Self::INVARIANT,
            ErrorClass::Numeric => Self::NUMERIC,
        };
        Self { code, message: e.to_string() }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::invariant(format!("i/o: {e}"))
    }
}

impl From<csv::Error> for Failure {
    fn from(e: csv::Error) -> Self {
        Self::invariant(format!("csv: {e}"))
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Self::invariant(format!("json: {e}"))
    }
}
