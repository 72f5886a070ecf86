use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{field}: {path}: {source}")]
    Path {
        field: String,
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("feature `{0}` has zero variance")]
    DegenerateFeature(String),

    #[error("factor {0} has zero variance")]
    DegenerateFactor(usize),

    #[error("rank {rank} is below the requested {requested} components")]
    Rank { rank: usize, requested: usize },

    #[error("linear solve failed: {0}")]
    Solver(String),

    #[error("training diverged: non-finite objective after sweep {0}")]
    Divergence(usize),

    #[error("capability error: {0}")]
    Capability(String),

    #[error("index out of bounds: {0}")]
    Index(String),

    #[error(
        "artifact {artifact} was built with config hash {found}, current config is {expected}"
    )]
    HashMismatch {
        artifact: String,
        expected: String,
        found: String,
    },

    #[error("malformed artifact: {0}")]
    Artifact(String),
}

impl Error {
    /// Process exit code for the error category.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Config(_) | Error::Path { .. } => 2,
            Error::Io(_) => 3,
            Error::Parse { .. } | Error::Artifact(_) => 4,
            Error::Data(_) | Error::Index(_) => 5,
            Error::Shape(_)
            | Error::DegenerateFeature(_)
            | Error::DegenerateFactor(_)
            | Error::Rank { .. }
            | Error::Solver(_)
            | Error::Divergence(_) => 6,
            Error::Capability(_) => 7,
            Error::HashMismatch { .. } => 8,
        }
    }

    pub(crate) fn parse(line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            line,
            msg: msg.into(),
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Artifact(e.to_string())
    }
}
