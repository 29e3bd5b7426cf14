//! Error type shared by all simulator modules.

/// Errors produced by the simulator and analysis pipeline.
///
/// The CLI maps these onto exit codes: configuration-class errors
/// (`InvalidInput`, `Topology`, `Config`, `CalibrationPair`, `Range`)
/// exit with 2, `Data` errors with 3.
#[derive(Debug, thiserror::Error)]
pub enum CednError {
    /// A numeric argument is out of its domain (non-finite phase, negative voltage, ...).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// The chip wiring violates a topology invariant.
    #[error("topology error: {0}")]
    Topology(String),

    /// A scenario or parameter set is inconsistent.
    #[error("configuration error: {0}")]
    Config(String),

    /// Input data (timetag streams, keys) is malformed.
    #[error("data error: {0}")]
    Data(String),

    /// A calibration sweep was requested on a pair that cannot show the swept fringe.
    #[error("calibration pair error: {0}")]
    CalibrationPair(String),

    /// Least-squares calibration could not identify the model.
    #[error("fit failure: {0}")]
    FitFailure(String),

    /// A lookup outside the tabulated domain.
    #[error("range error: {0}")]
    Range(String),
}

pub type Result<T> = std::result::Result<T, CednError>;
