use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by every stage of the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("schema error in field `{field}`{}: {message}", line.map(|l| format!(" (line {l})")).unwrap_or_default())]
    Schema {
        field: String,
        line: Option<usize>,
        message: String,
    },
    #[error("unknown task `{0}`")]
    MissingTask(String),
    #[error("question `{0}` fits no template")]
    UnmatchedTemplate(String),
    #[error("template `{template}` carries conflicting type labels `{first}` and `{second}`")]
    AmbiguousTemplate {
        template: String,
        first: String,
        second: String,
    },
    #[error("generation failure: {0}")]
    GenerationFailure(String),
    #[error("generation exhausted: {produced} of {requested} samples after {attempts} attempts")]
    GenerationExhausted {
        requested: usize,
        produced: usize,
        attempts: usize,
    },
    #[error("unknown question type `{0}`")]
    UnknownType(String),
    #[error("sample `{0}` has no question-type meta label")]
    MissingMetaInfo(String),
    #[error("insufficient data: {have} points for {need} clusters")]
    InsufficientData { have: usize, need: usize },
    #[error("embedder mismatch: partition fitted with `{expected}`, got `{found}`")]
    EmbedderMismatch { expected: String, found: String },
    #[error("empty generated pool for task `{0}`")]
    EmptyPool(String),
    #[error("question not present in external embedding table: `{0}`")]
    UnknownQuestion(String),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("duplicate question in embedding table: `{0}`")]
    DuplicateQuestion(String),
    #[error("accuracy matrix is incomplete: missing a[{row}][{col}]")]
    IncompleteMatrix { row: usize, col: usize },
    #[error("average forgetting is undefined for a single task")]
    UndefinedForSingleTask,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("seed {seed}, task `{task}`: {source}")]
    Run {
        seed: u64,
        task: String,
        #[source]
        source: Box<Error>,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn schema(field: &str, message: impl Into<String>) -> Self {
        Error::Schema {
            field: field.to_string(),
            line: None,
            message: message.into(),
        }
    }

    pub(crate) fn at_line(self, line: usize) -> Self {
        match self {
            Error::Schema { field, message, .. } => Error::Schema {
                field,
                line: Some(line),
                message,
            },
            other => other,
        }
    }
}
