use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("invalid control value: {0}")]
    InvalidControl(String),

    #[error("invalid control signal: {0}")]
    InvalidSignal(String),

    #[error("integration blow-up at t = {t}: component {component} = {value}")]
    IntegrationBlowup {
        t: f64,
        component: &'static str,
        value: f64,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("degenerate set geometry: {0}")]
    DegenerateGeometry(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("feasible-control synthesis refused: {0}")]
    SynthesisRefused(String),

    #[error("scenario file {path}: {message}")]
    Scenario { path: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
