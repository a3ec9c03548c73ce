use thiserror::Error;

use echoqa_nn::NnError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("rubric: {0}")]
    Rubric(String),
    #[error("projection singularity: |z| = {0:e} is too close to 0")]
    Singular(f64),
    #[error("clip {clip}: {message}")]
    Clip { clip: String, message: String },
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("training diverged at epoch {epoch}: {stream} loss is not finite")]
    Diverged { epoch: usize, stream: String },
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::Invalid(msg.into())
}

pub(crate) fn io(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> Error {
    let context = context.into();
    move |source| Error::Io { context, source }
}

pub(crate) fn json(context: impl Into<String>) -> impl FnOnce(serde_json::Error) -> Error {
    let context = context.into();
    move |source| Error::Json { context, source }
}
