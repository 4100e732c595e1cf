use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid topology: {0}")]
    InvalidTopology(String),

    #[error("random geometric graph still disconnected after {attempts} placements")]
    TopologyGeneration { attempts: usize },

    #[error("contract violation: {0}")]
    ContractViolation(String),

    #[error("shape mismatch: expected {expected}, found {found}")]
    Shape { expected: String, found: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("insufficient data: need {needed} samples, only {available} available")]
    InsufficientData { needed: usize, available: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("iterate diverged at iteration {iteration} (agent {agent}): non-finite value")]
    Divergence { iteration: usize, agent: usize },

    #[error("run diverged at iteration {iteration} (agent {agent}); {} trace rows recorded", trace.rows.len())]
    DivergedRun {
        iteration: usize,
        agent: usize,
        trace: Box<crate::engine::MetricsTrace>,
    },

    #[error("step size is not contractive: zeta = {zeta} >= 1")]
    NonContractive { zeta: f64 },

    #[error("oracle failed to converge: {0}")]
    OracleFailure(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(expected: impl ToString, found: impl ToString) -> Self {
        Error::Shape {
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }
}
