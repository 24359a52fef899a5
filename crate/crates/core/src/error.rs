use thiserror::Error;

/// Errors raised by the numerical laboratory.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// An argument lies outside the domain where the operation is defined.
    #[error("domain error: {0}")]
    Domain(String),

    /// A configuration value violates an invariant. `field` names the offending key.
    #[error("invalid configuration `{field}`: {message}")]
    Config { field: String, message: String },

    /// The explicit time step is too large for the discrete velocities encountered.
    #[error("CFL violation in {stage}: dt = {dt:e} exceeds the stable bound {limit:e} (cfl = {cfl})")]
    Cfl {
        stage: &'static str,
        dt: f64,
        limit: f64,
        cfl: f64,
    },

    /// The density vanished identically at some time level.
    #[error("empty support at time index {time_index} (t = {time})")]
    EmptySupport { time_index: usize, time: f64 },

    /// A least-squares fit could not be formed from the data.
    #[error("degenerate fit for {quantity}: {reason}")]
    DegenerateFit { quantity: String, reason: String },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Domain(msg.into()))
}

pub(crate) fn config<T>(field: &str, msg: impl Into<String>) -> Result<T> {
    Err(Error::Config {
        field: field.to_string(),
        message: msg.into(),
    })
}
