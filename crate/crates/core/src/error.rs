use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// The blow-up monitor tripped: a field norm exceeded the threshold.
    #[error("blow-up at t = {time}: |{component}|_H = {norm:e} exceeds {threshold:e}")]
    BlowUp { time: f64, component: &'static str, norm: f64, threshold: f64 },

    #[error("control budget exceeded at t = {time}: spent {spent} > N = {budget}")]
    BudgetExceeded { time: f64, spent: f64, budget: f64 },

    /// `q̄` fell below the declared lower bound `c₀`.
    #[error("effective diffusion {value} at x = {x} is below the declared bound c0 = {c0}")]
    BoundViolation { x: f64, value: f64, c0: f64 },

    #[error("Picard iteration failed to contract: {0}")]
    NoContraction(String),

    #[error("hypothesis check failed: {0}")]
    Hypothesis(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("TOML error: {0}")]
    Toml(#[from] toml::de::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
