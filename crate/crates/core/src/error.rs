use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("group element {element} of C{order} is not a multiple of 90 degrees")]
    UnsupportedElement { element: usize, order: usize },
    #[error("non-finite value in {what} (batch index {index})")]
    Numeric { what: String, index: usize },
    #[error("data error: {0}")]
    Data(String),
    #[error("malformed {what}: {detail}")]
    Format { what: String, detail: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Self::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Self::Config(msg.into())
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Self::Parameter(msg.into())
    }
}

impl From<eqdiff_tensor::ShapeError> for Error {
    fn from(e: eqdiff_tensor::ShapeError) -> Self {
        Self::Shape(e.to_string())
    }
}
