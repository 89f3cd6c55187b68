use std::path::PathBuf;

/// Errors raised anywhere in the pipeline.
///
/// The variants are grouped so a front end can map them onto stable exit
/// codes (see [`Error::exit_code`]).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("token `{0}` is not in the prompt vocabulary")]
    OutOfVocabulary(String),

    #[error("integrity check failed for {path}: {reason}")]
    Integrity { path: PathBuf, reason: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("missing artifact: {0}")]
    MissingArtifact(PathBuf),

    #[error("architecture mismatch on `{field}`: checkpoint has {found}, configuration expects {expected}")]
    ArchitectureMismatch {
        field: String,
        expected: String,
        found: String,
    },

    #[error("training did not converge: {0}")]
    NonConvergence(String),

    #[error("malformed tensor container: {0}")]
    Container(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn integrity(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Integrity {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Short stable name of the variant, for structured logs.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Shape(_) => "shape",
            Error::OutOfVocabulary(_) => "out_of_vocabulary",
            Error::Integrity { .. } => "integrity",
            Error::Numerical(_) => "numerical",
            Error::MissingArtifact(_) => "missing_artifact",
            Error::ArchitectureMismatch { .. } => "architecture_mismatch",
            Error::NonConvergence(_) => "non_convergence",
            Error::Container(_) => "container",
            Error::Io(_) => "io",
            Error::Tensor(_) => "tensor",
            Error::Json(_) => "json",
            Error::Image(_) => "image",
        }
    }

    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::OutOfVocabulary(_) | Error::ArchitectureMismatch { .. } => 2,
            Error::Integrity { .. } | Error::Container(_) => 3,
            Error::Numerical(_) | Error::NonConvergence(_) => 4,
            Error::MissingArtifact(_) => 5,
            _ => 1,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
