use std::path::PathBuf;

pub type Result<T, E = SynthError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    /// A scene violates its geometric invariants.
    #[error("invalid scene: {0}")]
    Spec(String),
    #[error("configuration error: {0}")]
    Config(String),
    /// Problems found while loading a dataset, keyed by clip id.
    #[error("dataset failed validation:\n{}", .problems.iter().map(|(id, p)| format!("  {id}: {p}")).collect::<Vec<_>>().join("\n"))]
    Load { problems: Vec<(String, String)> },
    #[error("malformed manifest {path}: {detail}")]
    Manifest { path: PathBuf, detail: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {detail}")]
    Image { path: PathBuf, detail: String },
    #[error(transparent)]
    Core(#[from] eqdiff_core::Error),
}

impl SynthError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}
