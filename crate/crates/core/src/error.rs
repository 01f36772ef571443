use thiserror::Error;

/// Library-wide error type. Variants are grouped by which stage of the
/// pipeline rejected the input, so callers (notably the CLI) can map them
/// onto "bad input" versus "something broke at runtime".
#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: {0}")]
    Schema(String),

    #[error("query error: {0}")]
    Query(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("workload error: {0}")]
    Workload(String),

    #[error("model error: {0}")]
    Model(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for errors that stem from malformed or inconsistent input
    /// (files, flags, queries) rather than from a failure while running.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::Schema(_)
                | Error::Query(_)
                | Error::Workload(_)
                | Error::Checkpoint(_)
                | Error::Dataset(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
