//! Crate-wide error type and the exit-code mapping used by the CLI.

use thiserror::Error;

/// Everything that can go wrong while configuring or running a simulation.
#[derive(Debug, Error)]
pub enum SiagError {
    /// A configuration value is out of range or inconsistent.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// Step-size/constants parameters violate the admissibility conditions
    /// required by the convergence analysis.
    #[error("inadmissible analysis parameters: {0}")]
    Inadmissible(String),

    /// A vector had the wrong length for the operation.
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    /// A gradient report did not match the active set / iteration contract.
    #[error("bad gradient report: {0}")]
    BadReport(String),

    /// The iterate norm exceeded the divergence guard or became non-finite.
    #[error("divergence in trial {trial} at iteration {iter}: |w| = {norm:.3e}")]
    Divergence { trial: usize, iter: usize, norm: f64 },

    /// Not enough data to run a statistical operation (fits, estimates).
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl SiagError {
    /// Process exit code for this error: 2 = invalid config/parameters,
    /// 3 = divergence, 4 = I/O or serialization failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            SiagError::InvalidConfig(_)
            | SiagError::Inadmissible(_)
            | SiagError::DimensionMismatch { .. }
            | SiagError::BadReport(_)
            | SiagError::InsufficientData(_) => 2,
            SiagError::Divergence { .. } => 3,
            SiagError::Io(_) | SiagError::Csv(_) | SiagError::Json(_) => 4,
        }
    }
}
