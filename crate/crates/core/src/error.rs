use std::path::PathBuf;

/// Errors produced by the core library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A malformed line in an input file. `line` is 1-based.
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("duplicate id `{0}`")]
    DuplicateId(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("dimension mismatch for `{id}`: expected {expected}, got {got}")]
    Dimension {
        id: String,
        expected: usize,
        got: usize,
    },

    #[error("configuration error: {0}")]
    Config(String),

    /// Failure talking to an external rewriter or embedder backend.
    #[error("client error{}: {message}", query_id.as_ref().map(|q| format!(" for query `{q}`")).unwrap_or_default())]
    Client {
        query_id: Option<String>,
        message: String,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<String>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }

    pub fn client(message: impl Into<String>) -> Self {
        Error::Client {
            query_id: None,
            message: message.into(),
        }
    }

    /// Attaches a query id to a client error; other variants pass through.
    pub fn for_query(self, query_id: &str) -> Self {
        match self {
            Error::Client { message, .. } => Error::Client {
                query_id: Some(query_id.to_string()),
                message,
            },
            other => other,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
