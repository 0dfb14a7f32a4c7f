//! Crate-wide error type.
//!
//! Every failure surfaces as one of these variants; the CLI maps each variant
//! to a stable machine-parsable class string on exit.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed input file content (names line and field where known).
    #[error("parse error: {0}")]
    Parse(String),
    /// Structurally valid file that violates the cohort schema.
    #[error("schema error: {0}")]
    Schema(String),
    /// Invalid configuration value or combination.
    #[error("config error: {0}")]
    Config(String),
    /// Stratified split cannot be performed.
    #[error("split error: {0}")]
    Split(String),
    /// An API precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),
    /// Name not present in the parameter store.
    #[error("lookup error: {0}")]
    Lookup(String),
    /// Metric undefined for the given inputs.
    #[error("metric error: {0}")]
    Metric(String),
    /// Forward rollout cannot proceed for this subject.
    #[error("rollout error: {0}")]
    Rollout(String),
    /// Non-finite value where a finite one is required.
    #[error("numerical error: {0}")]
    Numerical(String),
    /// Checkpoint file malformed or inconsistent.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    /// Training diverged (non-finite loss).
    #[error("divergence: {0}")]
    Divergence(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable single-token class identifier for machine-parsable CLI errors.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Parse(_) => "parse-error",
            Error::Schema(_) => "schema-error",
            Error::Config(_) => "config-error",
            Error::Split(_) => "split-error",
            Error::Contract(_) => "contract-violation",
            Error::Lookup(_) => "lookup-error",
            Error::Metric(_) => "metric-error",
            Error::Rollout(_) => "rollout-error",
            Error::Numerical(_) => "numerical-error",
            Error::Checkpoint(_) => "checkpoint-error",
            Error::Divergence(_) => "divergence-error",
            Error::Io(_) => "io-error",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
