use std::path::PathBuf;

use far_core::Error as CoreError;

/// Errors raised by the file formats, pipeline stages and CLI.
#[derive(Debug, thiserror::Error)]
pub enum FarError {
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot decode {}: {message}", path.display())]
    Decode { path: PathBuf, message: String },
    #[error("schema error in {}: {message}", path.display())]
    Schema { path: PathBuf, message: String },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("checkpoint {}: {message}", path.display())]
    Checkpoint { path: PathBuf, message: String },
    #[error("metric plugin {name}: {message}")]
    Plugin { name: String, message: String },
}

impl FarError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            FarError::MissingFile(path)
        } else {
            FarError::Io { path, source }
        }
    }

    /// Short machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            FarError::Core(e) => match e.root() {
                CoreError::Schema(_) => "SchemaError",
                CoreError::Shape(_) => "ShapeError",
                CoreError::EmptyMask { .. } => "EmptyMask",
                CoreError::RetryExhausted { .. } => "RetryExhausted",
                CoreError::BadPolicy(_) => "BadPolicy",
                CoreError::DuplicateToken(_) => "DuplicateToken",
                CoreError::UnknownClass(_) => "UnknownClass",
                CoreError::PromptTooLong { .. } => "PromptTooLong",
                CoreError::DimensionMismatch(_) => "DimensionMismatch",
                CoreError::ShapeMismatch(_) => "ShapeMismatch",
                CoreError::IndivisibleSize { .. } => "IndivisibleSize",
                CoreError::MissingToken(_) => "MissingToken",
                CoreError::NonFinite(_) => "NonFiniteLoss",
                CoreError::UnknownTag(_) => "UnknownTag",
                CoreError::UnknownPlaceholder(_) => "UnknownPlaceholder",
                CoreError::Config(_) => "ConfigError",
                CoreError::Context { .. } => unreachable!("root strips context"),
            },
            FarError::MissingFile(_) => "MissingFile",
            FarError::Io { .. } => "IoError",
            FarError::Decode { .. } => "DecodeError",
            FarError::Schema { .. } => "SchemaError",
            FarError::Config(_) => "ConfigError",
            FarError::Checkpoint { .. } => "CheckpointError",
            FarError::Plugin { .. } => "PluginError",
        }
    }

    /// 1 for bad inputs (validation), 2 for failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            FarError::Core(e) => match e.root() {
                CoreError::NonFinite(_) | CoreError::RetryExhausted { .. } => 2,
                _ => 1,
            },
            FarError::MissingFile(_) | FarError::Decode { .. } | FarError::Schema { .. } | FarError::Config(_) => 1,
            FarError::Checkpoint { .. } => 1,
            FarError::Io { .. } | FarError::Plugin { .. } => 2,
        }
    }

    /// File the error is about, if any.
    pub fn path(&self) -> Option<&std::path::Path> {
        match self {
            FarError::MissingFile(p) => Some(p),
            FarError::Io { path, .. }
            | FarError::Decode { path, .. }
            | FarError::Schema { path, .. }
            | FarError::Checkpoint { path, .. } => Some(path),
            _ => None,
        }
    }
}

pub type Result<T, E = FarError> = std::result::Result<T, E>;
