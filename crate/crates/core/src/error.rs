use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: malformed record: {message}")]
    MalformedLine { line: usize, message: String },

    #[error("duplicate passage id `{0}`")]
    DuplicatePassage(String),

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("unknown passage `{0}`")]
    UnknownPassage(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("passage encoder is not frozen; freeze before offline encoding")]
    EncoderNotFrozen,

    #[error("passage encoder is frozen; W_p can no longer be updated")]
    EncoderFrozen,

    #[error("embedding store fingerprint {store:016x} does not match model fingerprint {model:016x}")]
    FingerprintMismatch { store: u64, model: u64 },

    #[error("missing vector for node `{0}`")]
    MissingNodeVector(String),

    #[error("missing human F1 for question `{0}`")]
    MissingHumanF1(String),

    #[error("infeasible plant: {0}")]
    InfeasiblePlant(String),

    #[error("non-finite loss on question `{question}`: {diagnostics}")]
    NonFiniteLoss { question: String, diagnostics: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable identifier, used by the CLI for machine-parseable errors.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::MalformedLine { .. } => "malformed-line",
            Error::DuplicatePassage(_) => "duplicate-passage",
            Error::EmptyCorpus => "empty-corpus",
            Error::UnknownPassage(_) => "unknown-passage",
            Error::DimensionMismatch { .. } => "dimension-mismatch",
            Error::EncoderNotFrozen => "encoder-not-frozen",
            Error::EncoderFrozen => "encoder-frozen",
            Error::FingerprintMismatch { .. } => "fingerprint-mismatch",
            Error::MissingNodeVector(_) => "missing-node-vector",
            Error::MissingHumanF1(_) => "missing-human-f1",
            Error::InfeasiblePlant(_) => "infeasible-plant",
            Error::NonFiniteLoss { .. } => "non-finite-loss",
            Error::InvalidArgument(_) => "invalid-argument",
            Error::Format(_) => "format",
            Error::Json(_) => "json",
        }
    }
}
