use std::path::PathBuf;

/// Errors produced by every pruneprint operation.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("malformed NPY file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("unsupported dtype {descr:?} in {path} (expected <f4 or <f8)")]
    UnsupportedDtype { path: PathBuf, descr: String },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("no files in {dir} match {pattern:?}")]
    EmptySet { dir: PathBuf, pattern: String },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("serialization error: {0}")]
    Serialization(String),

    #[error("layer {name}: {source}")]
    Layer {
        name: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn in_layer(self, name: &str) -> Self {
        Error::Layer {
            name: name.to_string(),
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
