use std::io;

use thiserror::Error;

/// Errors produced by the compression engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("bad container magic {0:?}")]
    BadMagic([u8; 4]),

    #[error("unsupported container version {0}")]
    UnsupportedVersion(u32),

    #[error("grid {rows}x{cols} does not cover {tokens} tokens per frame")]
    GridMismatch { rows: usize, cols: usize, tokens: usize },

    #[error("invalid dimensions: {0}")]
    InvalidDimensions(String),

    #[error("non-finite value in {what} at frame {frame}, token {token}")]
    NonFinite {
        what: &'static str,
        frame: usize,
        token: usize,
    },

    #[error("token {token} of frame {frame} has zero norm")]
    ZeroNormToken { frame: usize, token: usize },

    #[error("saliency of frame {frame} sums to {sum}, outside tolerance")]
    SaliencySum { frame: usize, sum: f64 },

    #[error("invalid parameter {name}: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("budget of {total} operations exceeds the aggregate cap {cap}")]
    InfeasibleBudget { total: usize, cap: usize },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("instance too large for exhaustive solve: {0}")]
    InstanceTooLarge(String),

    #[error("malformed report: {0}")]
    Report(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    /// Stable machine-readable code, for hosts that map engine errors onto
    /// their own error types.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Io(_) => "io",
            Error::BadMagic(_) => "bad_magic",
            Error::UnsupportedVersion(_) => "unsupported_version",
            Error::GridMismatch { .. } => "grid_mismatch",
            Error::InvalidDimensions(_) => "invalid_dimensions",
            Error::NonFinite { .. } => "non_finite",
            Error::ZeroNormToken { .. } => "zero_norm_token",
            Error::SaliencySum { .. } => "saliency_sum",
            Error::InvalidParameter { .. } => "invalid_parameter",
            Error::InfeasibleBudget { .. } => "infeasible_budget",
            Error::Numerical(_) => "numerical_failure",
            Error::InstanceTooLarge(_) => "instance_too_large",
            Error::Report(_) => "malformed_report",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
