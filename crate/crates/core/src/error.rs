use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    /// Non-finite loss or gradient during optimization. `batch` is the
    /// global minibatch counter when known.
    #[error("training error{}: {message}", batch.map(|b| format!(" at batch {b}")).unwrap_or_default())]
    Training { batch: Option<usize>, message: String },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("simulation aborted on day {day}: {source}")]
    Simulation {
        day: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("internal error: {0}")]
    Internal(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn training(msg: impl Into<String>) -> Self {
        Error::Training {
            batch: None,
            message: msg.into(),
        }
    }

    /// Attaches a batch index to a training error; other errors pass through.
    pub(crate) fn at_batch(self, index: usize) -> Self {
        match self {
            Error::Training { batch: None, message } => Error::Training {
                batch: Some(index),
                message,
            },
            other => other,
        }
    }
}
