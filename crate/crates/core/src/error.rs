use thiserror::Error;

/// Errors produced anywhere in the gradient-feature pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Io(#[from] std::io::Error),

    /// A file did not have the expected layout (magic number, version, header).
    #[error("format error: {0}")]
    Format(String),

    /// A file ended before the payload its header announced.
    #[error("length error: expected {expected} bytes, found {found}")]
    Length { expected: usize, found: usize },

    #[error("validation error: {0}")]
    Validation(String),

    /// A request exceeds the sizes this crate is willing to materialize.
    #[error("capacity error: {0}")]
    Capacity(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    /// A pipeline stage failed; `stage` names it.
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}

/// Tags the error of a fallible pipeline stage with the stage name.
pub(crate) trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| Error::Stage {
            stage,
            source: Box::new(e),
        })
    }
}
