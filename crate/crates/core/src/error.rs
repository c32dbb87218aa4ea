use std::path::PathBuf;

/// Errors produced by the simulation, oracle and estimation layers.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("grid too coarse: spacing {spacing:.4} exceeds {max}")]
    GridTooCoarse { spacing: f64, max: f64 },

    #[error("grid oracle did not converge: {0}")]
    NonConvergent(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("data inconsistent with model: {0}")]
    DataInconsistency(String),

    #[error("calibration failed: {0}")]
    Calibration(String),

    #[error("RF drive is off resonance; closed-form displacement requires phase 0 and drive frequency equal to the Larmor frequency")]
    OffResonant,

    #[error("record file line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
