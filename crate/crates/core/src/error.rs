use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: field `{field}`: {message}")]
    Parse {
        line: usize,
        field: &'static str,
        message: String,
    },

    #[error("timestamp out of representable range: {0}")]
    TimestampRange(String),

    #[error("question {0} not found in corpus")]
    QuestionNotFound(u64),

    #[error("question {0} is not eligible for analysis")]
    Ineligible(u64),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error(
        "perfect separation detected while fitting propensity model ({0}); inspect the features"
    )]
    Separation(String),

    #[error(
        "{model} did not converge after {iterations} iterations (last change {last_change:e})"
    )]
    NonConvergence {
        model: &'static str,
        iterations: usize,
        last_change: f64,
    },

    #[error("dataset has no events")]
    NoEvents,

    #[error("non-finite linear predictor at row {row}")]
    NonFiniteLinearPredictor { row: usize },

    #[error("Hessian is singular")]
    SingularHessian,

    #[error("stratum `{0}` has no matched pairs")]
    EmptyStratum(String),

    #[error("degenerate percentile bounds for column `{0}`: all values equal")]
    DegeneratePercentiles(String),

    #[error("missing input artifact: {0}")]
    MissingInput(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
