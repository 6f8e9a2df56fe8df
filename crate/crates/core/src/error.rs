use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("tokenization error: unknown symbol {0:?}")]
    Tokenize(char),

    #[error("render error: {0}")]
    Render(String),

    #[error("decode error: {0}")]
    Decode(String),

    #[error("numerical degeneracy: {0}")]
    Degenerate(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable tag used for machine-parsable CLI errors.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidShape(_) => "invalid-shape",
            Error::InvalidInput(_) => "invalid-input",
            Error::Config(_) => "config",
            Error::Tokenize(_) => "tokenize",
            Error::Render(_) => "render",
            Error::Decode(_) => "decode",
            Error::Degenerate(_) => "degenerate",
            Error::Format(_) => "format",
            Error::Io { .. } => "io",
        }
    }
}
