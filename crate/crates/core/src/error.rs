use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("day {day} is outside the contact-rate series of length {len}")]
    Range { day: usize, len: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("SEIR integration diverged on day {day}: {detail}")]
    IntegrationFailure { day: usize, detail: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("parse error in {file} at line {line}, column {column}: {message}")]
    Parse {
        file: String,
        line: u64,
        column: String,
        message: String,
    },

    #[error("join error: regions without a matching {missing_in} entry: {orphans:?}")]
    Join {
        missing_in: String,
        orphans: Vec<String>,
    },

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("training error at parameter `{parameter}`: {message}")]
    Training { parameter: String, message: String },

    #[error("training aborted: {0}")]
    TrainingAborted(String),

    #[error("unknown region `{0}`")]
    UnknownRegion(String),

    #[error("forecast error: {0}")]
    Forecast(String),

    #[error("fit error: {0}")]
    Fit(String),

    #[error(
        "insufficient policy variation: {distinct} distinct stringency values, need at least 3"
    )]
    InsufficientVariation { distinct: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures caused by input data rather than numerics.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. }
                | Error::Join { .. }
                | Error::Alignment(_)
                | Error::UnknownRegion(_)
                | Error::Io(_)
                | Error::Json(_)
                | Error::Checkpoint(_)
                | Error::Shape(_)
                | Error::InsufficientVariation { .. }
        )
    }
}
