use std::path::PathBuf;

/// Errors raised by the library.
///
/// [`Error::is_validation`] splits them into input/config problems and
/// runtime failures; the CLI maps the two groups to distinct exit codes.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("invalid tag set: {0}")]
    TagSet(String),
    #[error("invalid span: {0}")]
    InvalidSpan(String),
    #[error("flat conflict resolution requires scored spans; span {0} has no score")]
    MissingScore(String),
    #[error("catalog incomplete: no query for entity type {0}")]
    CatalogIncomplete(String),
    #[error("invalid catalog: {0}")]
    Catalog(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("input of {len} tokens exceeds encoder maximum length {max}")]
    Overflow { len: usize, max: usize },
    #[error("match index out of range: ({start}, {end}) with n = {n}")]
    MatchIndex { start: usize, end: usize, n: usize },
    #[error("gold pair ({0}, {1}) is missing from the candidate set")]
    MissingCandidate(usize, usize),
    #[error("no match probability for candidate pair ({0}, {1})")]
    MissingMatchProbability(usize, usize),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("sentence ids differ between gold and predictions: {0}")]
    SentenceMismatch(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("tag set mismatch: {0}")]
    TagSetMismatch(String),
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },
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

    /// True for errors caused by bad input data, catalogs or configuration.
    pub fn is_validation(&self) -> bool {
        !matches!(
            self,
            Error::Io { .. } | Error::NonFiniteLoss { .. } | Error::Checkpoint(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
