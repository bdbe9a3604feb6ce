use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the simulation and control pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    Parameter { name: &'static str, reason: String },

    #[error("hydraulic state diverged: {0}")]
    Instability(String),

    #[error("no steady operating point for opening {opening}: {reason}")]
    InfeasibleOperatingPoint { opening: f64, reason: String },

    #[error("generator lost synchronism: rotor angle {angle:.4} rad")]
    LossOfSynchronism { angle: f64 },

    #[error("tuning failed: {reason} (best candidate {best:?})")]
    Tuning { reason: String, best: Option<f64> },

    #[error("linearization rejected: {0}")]
    OperatingPoint(String),

    #[error("discretization rejected: spectral radius {spectral_radius:.6} >= 1")]
    Discretization { spectral_radius: f64 },

    #[error("relative damage index undefined: base-case damage is zero everywhere")]
    UndefinedRdi,

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),

    #[error("problem construction failed: {0}")]
    Construction(String),

    #[error("quadratic program infeasible: {0}")]
    Infeasible(String),

    #[error("fatigue filter failed: {0}")]
    Filter(String),

    #[error("controller comparison rejected: {0}")]
    Comparison(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{path}: row {row}: {reason}")]
    Ingestion {
        path: PathBuf,
        row: usize,
        reason: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn require_positive(name: &'static str, value: f64) -> Result<()> {
    if value.is_finite() && value > 0.0 {
        Ok(())
    } else {
        Err(Error::Parameter {
            name,
            reason: format!("must be finite and > 0, got {value}"),
        })
    }
}
