use thiserror::Error;

use crate::train::TrainReport;

/// Problems with a requested configuration: tree shape, budget or ratio.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("axis {axis} has size {size}, not divisible by {divisor} (2^(levels-1))")]
    NotDivisible {
        axis: &'static str,
        size: usize,
        divisor: usize,
    },
    #[error("parameter budget {budget} is infeasible; the smallest feasible budget is {minimal}")]
    InfeasibleBudget { budget: u64, minimal: u64 },
    #[error(
        "target ratio {target} is infeasible for this tree; the maximal feasible ratio is {max_feasible:.3}"
    )]
    InfeasibleRatio { target: f64, max_feasible: f64 },
    #[error("{0}")]
    Invalid(String),
}

/// Errors raised while parsing `.tinc` / `.tvol` containers.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: &'static str },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u8),
    #[error("truncated file: need {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("{extra} unexpected trailing bytes")]
    TrailingBytes { extra: usize },
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("malformed header: {0}")]
    Malformed(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed input: {0}")]
    MalformedInput(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("training diverged at iteration {iteration} (loss {loss})")]
    Diverged {
        iteration: usize,
        loss: f64,
        report: Box<TrainReport>,
    },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Short machine-readable class name, also used for process exit codes.
    pub fn class(&self) -> &'static str {
        match self {
            Error::MalformedInput(_) | Error::Format(_) => "format",
            Error::Config(_) => "config",
            Error::Diverged { .. } => "diverged",
            Error::Io(_) => "io",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::MalformedInput(_) | Error::Format(_) => 3,
            Error::Diverged { .. } => 4,
            Error::Io(_) => 5,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
