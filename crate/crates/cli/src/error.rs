use eqdiff_synthbench::SynthError;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

/// Failures grouped by the exit code they map to.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Self::Config(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Self::Data(msg.into())
    }

    pub(crate) fn io(path: &std::path::Path, e: std::io::Error) -> Self {
        Self::Data(format!("{}: {e}", path.display()))
    }
}

impl From<eqdiff_core::Error> for CliError {
    fn from(e: eqdiff_core::Error) -> Self {
        use eqdiff_core::Error as E;
        let msg = e.to_string();
        match e {
            E::Parameter(_) | E::Shape(_) | E::Config(_) | E::UnsupportedElement { .. } => Self::Config(msg),
            E::Numeric { .. } => Self::Numeric(msg),
            E::Validation(_) | E::Data(_) | E::Format { .. } | E::Io { .. } => Self::Data(msg),
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Core(inner) => inner.into(),
            SynthError::Config(_) | SynthError::Spec(_) => Self::Config(e.to_string()),
            _ => Self::Data(e.to_string()),
        }
    }
}
