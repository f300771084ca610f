use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid format: {0}")]
    InvalidFormat(String),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("schema error: {0}")]
    SchemaError(String),
    #[error("no plan within {tolerance} of target ratio {target}; closest achievable {closest}")]
    RatioInfeasible {
        target: f64,
        tolerance: f64,
        closest: f64,
    },
    #[error("search run failed: {failed} of {trials} trials failed")]
    RunFailed { failed: usize, trials: usize },
    #[error("no successful trial records")]
    EmptyRun,
    #[error("domain error: {0}")]
    DomainError(String),
    #[error("underdetermined fit: {0}")]
    Underdetermined(String),
    #[error("no fittable data: every delta is nonpositive")]
    NoFittableData,
    #[error("parse error at line {line}: {message}")]
    ParseError { line: usize, message: String },
    #[error("conflicting runs: {0}")]
    ConflictError(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    /// Broad error class, used by front ends to pick exit codes.
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::RatioInfeasible { .. } => ErrorClass::Infeasible,
            Error::RunFailed { .. }
            | Error::EmptyRun
            | Error::DomainError(_)
            | Error::Underdetermined(_)
            | Error::NoFittableData => ErrorClass::Numeric,
            _ => ErrorClass::Input,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Input,
    Infeasible,
    Numeric,
}
