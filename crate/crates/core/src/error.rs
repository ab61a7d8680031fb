use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("unknown language `{0}`")]
    UnknownLanguage(String),

    #[error("value out of domain: {0}")]
    Domain(String),

    #[error("degenerate batch: every target position is padding")]
    DegenerateBatch,

    #[error("invalid input: {0}")]
    Input(String),

    #[error("batching error: {0}")]
    Batching(String),

    #[error("training diverged at step {step} (phase {phase}): {detail}")]
    Divergence {
        step: usize,
        phase: u8,
        detail: String,
    },

    #[error("refusing to enumerate 2^{n} assignments (limit is 2^{limit})")]
    EnumerationRefused { n: usize, limit: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),

    #[error(transparent)]
    TomlSer(#[from] toml::ser::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
