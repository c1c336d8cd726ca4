use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("arity mismatch: {0}")]
    Arity(String),

    #[error("invalid histogram: {0}")]
    InvalidHistogram(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("unbound parameter variable `{0}`")]
    UnboundParameter(String),

    #[error("unknown atom `{0}`")]
    UnknownAtom(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("distributions have mismatched supports ({0} vs {1} outcomes)")]
    SupportMismatch(usize, usize),

    #[error("distribution is not normalized (total mass {0})")]
    NotNormalized(f64),

    #[error("table has zero total mass")]
    ZeroMass,

    #[error("empty table")]
    EmptyTable,

    #[error("state space too large: {states} states exceeds cap {cap}")]
    StateSpaceCap { states: f64, cap: f64 },

    #[error("sampler failed: {0}")]
    Sampler(String),

    #[error("fit failed: {0}")]
    Fit(String),

    #[error("numerical underflow: {0}")]
    Underflow(String),

    #[error("inconsistent observations: all conditional weights are zero ({0})")]
    InconsistentObservations(String),

    #[error("LP solver failure: {0}")]
    Solver(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("io error: {0}")]
    Io(String),

    #[error("parfactor `{parfactor}`: {source}")]
    InParfactor {
        parfactor: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn in_parfactor(self, name: &str) -> Error {
        Error::InParfactor {
            parfactor: name.to_string(),
            source: Box::new(self),
        }
    }

    /// Name of the parfactor the error is attached to, if any.
    pub fn parfactor(&self) -> Option<&str> {
        match self {
            Error::InParfactor { parfactor, .. } => Some(parfactor),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
