use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A domain value violated a documented precondition. `field` names the
    /// offending input so config errors are actionable.
    #[error("invalid {field}: {message}")]
    Invalid { field: String, message: String },

    #[error("pulse energy {energy_nj} nJ outside calibration domain [{lo} nJ, {hi} nJ]")]
    EnergyOutOfRange { energy_nj: f64, lo: f64, hi: f64 },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("length mismatch: {what} ({left} vs {right})")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },

    #[error("fit did not converge: {0}")]
    NonConvergence(String),

    #[error("residual evaluated to a non-finite value at parameters {params:?}")]
    NonFiniteResidual { params: Vec<f64> },

    #[error("quadrature did not converge: {0}")]
    Quadrature(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("TOML error: {0}")]
    Toml(#[from] toml::de::Error),
}

impl Error {
    pub fn invalid(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Invalid {
            field: field.into(),
            message: message.into(),
        }
    }
}
