//! Error type shared by every module.

use thiserror::Error;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, SlowFastError>;

/// Failure modes of the engine.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum SlowFastError {
    /// A slow state lies outside the closed box of its domain.
    #[error("slow state {value:?} outside domain [{lower:?}, {upper:?}]")]
    Domain {
        value: Vec<f64>,
        lower: Vec<f64>,
        upper: Vec<f64>,
    },
    /// An orbit left the domain during integration.
    #[error("orbit left the domain at t = {time}")]
    DomainExit { time: f64 },
    /// Malformed argument (empty interval, bad dimensions, ...).
    #[error("invalid argument: {0}")]
    Argument(String),
    /// A derivative callable was requested but not supplied.
    #[error("capability missing: {0}")]
    Capability(String),
    /// An operation's precondition failed.
    #[error("precondition failed: {0}")]
    Precondition(String),
    /// Certificate inequalities cannot be met.
    #[error("infeasible certificate: {0}")]
    Infeasible(String),
    /// A map that must contract does not.
    #[error("contraction violated: {0}")]
    Contraction(String),
    /// Fixed-point iteration did not reach tolerance.
    #[error("no convergence after {iters} sweeps (last residual {residual:e})")]
    Divergence { iters: usize, residual: f64 },
    /// Sampled process norms show no exponential decay.
    #[error("no decay: {0}")]
    NoDecay(String),
    /// Too few informative samples for a fit.
    #[error("underdetermined: {0}")]
    Underdetermined(String),
    /// Time arguments in the wrong order for a forward-only process.
    #[error("time order: t = {t} < s = {s}")]
    Order { t: f64, s: f64 },
    /// Non-finite values, eigen-solver failure and similar.
    #[error("numeric failure: {0}")]
    Numeric(String),
    /// File or serialization failure.
    #[error("io: {0}")]
    Io(String),
}

impl SlowFastError {
    /// Short snake-case name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            SlowFastError::Domain { .. } => "domain",
            SlowFastError::DomainExit { .. } => "domain_exit",
            SlowFastError::Argument(_) => "argument",
            SlowFastError::Capability(_) => "capability",
            SlowFastError::Precondition(_) => "precondition",
            SlowFastError::Infeasible(_) => "infeasible",
            SlowFastError::Contraction(_) => "contraction",
            SlowFastError::Divergence { .. } => "divergence",
            SlowFastError::NoDecay(_) => "no_decay",
            SlowFastError::Underdetermined(_) => "underdetermined",
            SlowFastError::Order { .. } => "order",
            SlowFastError::Numeric(_) => "numeric",
            SlowFastError::Io(_) => "io",
        }
    }

    /// Stable process exit code: 1 usage, 2 infeasible, 3 non-convergence, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            SlowFastError::Argument(_) | SlowFastError::Io(_) => 1,
            SlowFastError::Infeasible(_) | SlowFastError::Precondition(_) => 2,
            SlowFastError::Divergence { .. } | SlowFastError::Contraction(_) => 3,
            _ => 4,
        }
    }
}

impl From<std::io::Error> for SlowFastError {
    fn from(e: std::io::Error) -> Self {
        SlowFastError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for SlowFastError {
    fn from(e: serde_json::Error) -> Self {
        SlowFastError::Io(e.to_string())
    }
}
