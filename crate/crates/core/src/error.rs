//! Crate-wide error type.
//!
//! Errors are grouped into three coarse kinds so a front end can map them to
//! exit codes: usage (bad arguments/config), I/O (filesystem, format), and
//! numerical (non-finite values, divergence, degenerate particle systems).

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("parameter shape {got:?} does not match declared shape {want:?}")]
    BadParamShape { got: Vec<usize>, want: Vec<usize> },

    #[error("non-finite value produced by op `{op}` (tape node {node})")]
    NonFinite { op: &'static str, node: usize },

    #[error("invalid argument: {0}")]
    InvalidArg(String),

    #[error("optimization diverged at step {step}: {what}")]
    Diverged { step: usize, what: String },

    #[error("all importance weights are -inf; no particle explains the observation")]
    DegenerateWeights,

    #[error(
        "particle system collapsed: ESS {ess:.3} stayed below 1.5 for {steps} consecutive steps (trace tail: {trace_tail:?})"
    )]
    ParticleCollapse {
        ess: f64,
        steps: usize,
        trace_tail: Vec<f64>,
    },

    #[error("io error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("format error in {path:?}: {what}")]
    Format { path: PathBuf, what: String },
}

/// Coarse classification used by front ends to pick process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Io,
    Numerical,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::BadParamShape { .. } | Error::InvalidArg(_) => ErrorKind::Usage,
            Error::Io { .. } | Error::Format { .. } => ErrorKind::Io,
            Error::NonFinite { .. }
            | Error::Diverged { .. }
            | Error::DegenerateWeights
            | Error::ParticleCollapse { .. } => ErrorKind::Numerical,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, what: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            what: what.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
