//! Error type shared by all modules.

/// Engine errors. Points are reported as `f64` regardless of the working
/// scalar, since they are diagnostic only.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Configuration(String),

    #[error("geometry error at q = {point:?}: {message}")]
    Geometry { message: String, point: Vec<f64> },

    #[error("dynamics error at q = {point:?}: {message}")]
    Dynamics { message: String, point: Vec<f64> },

    #[error("degenerate constraint system: {message} (condition estimate {condition:.3e})")]
    DegenerateConstraint { message: String, condition: f64 },

    #[error("constraint admission failure: {0}")]
    Admission(String),

    #[error("step failure at t = {time}: {message}")]
    StepFailure { time: f64, message: String },

    #[error("chart degeneracy: {0}")]
    ChartDegeneracy(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("unsupported diagnostic: {0}")]
    Unsupported(String),
}

pub type Result<T> = std::result::Result<T, Error>;
