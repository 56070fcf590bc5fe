use std::io;

use thiserror::Error;

/// Errors raised across the detection pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("input out of domain: {0}")]
    InputDomain(String),
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("calibration signal unusable: {0}")]
    CalibrationSignal(String),
    #[error("unreliable pulse: normalized correlation peak {peak:.3} below {min:.3}")]
    UnreliablePulse { peak: f64, min: f64 },
    #[error("insufficient calibration data: {usable} usable pulses, need at least {required}")]
    InsufficientCalibrationData { usable: usize, required: usize },
    #[error("inconsistent distance matrix: {0}")]
    InconsistentDistances(String),
    #[error("microphone gains unobservable: {0}")]
    GainUnobservable(String),

    #[error("invalid geometry: {0}")]
    Geometry(String),
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("contract violation: {0}")]
    ContractViolation(String),

    #[error("insufficient training data: {frames} frames, need at least {required}")]
    InsufficientTrainingData { frames: usize, required: usize },
    #[error("configuration error: {0}")]
    Configuration(String),
    #[error("sequencing error: second {got} does not follow second {previous}")]
    Sequencing { previous: u64, got: u64 },

    #[error("malformed {kind} data: {reason}")]
    Format { kind: &'static str, reason: String },
    #[error("unsupported {kind} version {version}")]
    Version { kind: &'static str, version: u32 },
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn format(kind: &'static str, reason: impl Into<String>) -> Self {
        Error::Format {
            kind,
            reason: reason.into(),
        }
    }
}
