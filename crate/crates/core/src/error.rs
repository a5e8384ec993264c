use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("backend unreachable: {0}")]
    BackendUnreachable(String),

    #[error("backend returned an empty response: {0}")]
    EmptyResponse(String),

    #[error("backend refused the request: {0}")]
    ContentRefused(String),

    #[error("backend protocol error: {0}")]
    Protocol(String),

    #[error("malformed image: {0}")]
    MalformedImage(String),

    #[error("unknown layer `{0}`")]
    UnknownLayer(String),

    #[error("unknown neuron {0}")]
    UnknownNeuron(String),

    #[error("degenerate split: all {0} values are equal")]
    DegenerateSplit(usize),

    #[error("neuron {0} is undescribable: every caption failed")]
    Undescribable(String),

    #[error("AUROC undefined: {0}")]
    UndefinedAuroc(String),

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("incomplete run, missing stages: {0:?}")]
    IncompleteRun(Vec<String>),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Errors worth another attempt against the same backend.
    pub fn is_retryable(&self) -> bool {
        matches!(self, Error::BackendUnreachable(_) | Error::EmptyResponse(_))
    }

    pub(crate) fn pre(msg: impl Into<String>) -> Self {
        Error::Precondition(msg.into())
    }
}
