//! Crate-wide error type. Every fallible operation returns [`Result`].

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A numeric argument was outside its documented domain.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// A scenario or experiment configuration cannot produce a scene.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// Two tensors or rasters that must share a shape do not.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// An exhaustive search would exceed its evaluation budget.
    #[error("evaluation budget exceeded: need {needed}, budget {budget}")]
    Budget { needed: usize, budget: usize },

    /// Serialized input that cannot be decoded.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A pipeline stage failed; the stage name is preserved for diagnostics.
    /// The cause is reported through `source()`, not repeated in `Display`.
    #[error("stage {stage} failed")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn in_stage(self, stage: &'static str) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Error {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
