use thiserror::Error;

/// Every failure the library can report.
///
/// Variants are grouped by how a batch runner should react: configuration
/// problems, invariant violations, and numeric instability.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid configuration: {0}")]
    InvalidConfiguration(String),

    #[error("invalid dimension {0}: need d >= 3")]
    InvalidDimension(usize),

    #[error("invalid scale {scale}: below the resolvable limit {limit}")]
    InvalidScale { scale: f64, limit: f64 },

    #[error("invalid level {level}: lower bound built up to level {base}")]
    InvalidLevel { level: u32, base: u32 },

    #[error("numeric overflow in sample {index}: log-weight {log_weight}")]
    NumericOverflow { index: usize, log_weight: f64 },

    #[error("positivity lost at site {site} on step {step} (u = {value})")]
    PositivityLoss { site: usize, step: u64, value: f64 },

    #[error("periodic wrap contaminated the solution: {0}")]
    WrapContamination(String),

    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Coarse classification used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Invariant,
    Numeric,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::InvalidArgument(_)
            | Error::InvalidInput(_)
            | Error::InvalidConfiguration(_)
            | Error::InvalidDimension(_)
            | Error::InvalidScale { .. }
            | Error::InvalidLevel { .. } => ErrorClass::Config,
            Error::WrapContamination(_) | Error::Io(_) => ErrorClass::Invariant,
            Error::NumericOverflow { .. } | Error::PositivityLoss { .. } => ErrorClass::Numeric,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
