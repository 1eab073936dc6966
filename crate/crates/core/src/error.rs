use alloc::string::String;

/// Errors raised by the algorithmic core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("schema error: {0}")]
    Schema(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("mask for concept {concept_id} is empty")]
    EmptyMask { concept_id: u32 },
    #[error("could not place subjects with visible area after {retries} retries")]
    RetryExhausted { retries: u32 },
    #[error("invalid placement policy: {0}")]
    BadPolicy(String),
    #[error("placeholder {0:?} is already in the vocabulary")]
    DuplicateToken(String),
    #[error("class name {0:?} has no known token")]
    UnknownClass(String),
    #[error("prompt has {len} tokens, limit is {max}")]
    PromptTooLong { len: usize, max: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("mask size {size} is not divisible by {target}")]
    IndivisibleSize { size: usize, target: usize },
    #[error("concept {0} has a mask but no placeholder token in the prompt")]
    MissingToken(u32),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("parameter {0:?} has no block-type tag")]
    UnknownTag(String),
    #[error("unknown placeholder {0:?}")]
    UnknownPlaceholder(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: alloc::boxed::Box<Error>,
    },
}

impl Error {
    /// Attaches provenance (sample, combo, step) to an error.
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: alloc::boxed::Box::new(self),
        }
    }

    /// The innermost error, with all context layers removed.
    pub fn root(&self) -> &Error {
        match self {
            Error::Context { source, .. } => source.root(),
            other => other,
        }
    }
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
