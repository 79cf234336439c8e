use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operands with incompatible shapes were wired together.
    #[error("shape error: {0}")]
    Shape(String),

    /// The requested model or placement cannot be built.
    #[error("construction error: {0}")]
    Construction(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("non-finite activation after stage {stage}")]
    NonFiniteActivation { stage: usize },

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    /// Malformed IDX file; `offset` is the byte position where parsing failed.
    #[error("{path}: IDX parse error at byte {offset}: {message}")]
    Idx {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    /// An error raised while running the named pipeline phase.
    #[error("{phase}: {source}")]
    Phase {
        phase: &'static str,
        #[source]
        source: Box<Error>,
    },
}

/// Tags an error with the pipeline phase that produced it.
pub trait PhaseExt<T> {
    fn phase(self, phase: &'static str) -> Result<T>;
}

impl<T, E: Into<Error>> PhaseExt<T> for std::result::Result<T, E> {
    fn phase(self, phase: &'static str) -> Result<T> {
        self.map_err(|e| Error::Phase {
            phase,
            source: Box::new(e.into()),
        })
    }
}
