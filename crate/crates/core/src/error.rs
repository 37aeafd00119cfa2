use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the distillation engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {what} (expected {expected}, got {got})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("game has {players} players, exact enumeration is capped at {cap}")]
    TooManyPlayers { players: usize, cap: usize },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("weighted least squares system is rank deficient (pivot {pivot}); coalitions: {coalitions:?}")]
    RankDeficient { pivot: usize, coalitions: Vec<u64> },

    #[error("training diverged at epoch {epoch}, batch {batch}: loss {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },

    #[error("class {class} has {available} candidates, {required} required (short by {})", required - available)]
    InsufficientCandidates {
        class: usize,
        available: usize,
        required: usize,
    },

    #[error("format error in {path}: {message} (offset {offset})")]
    Format {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("image {id}: {source}")]
    Image {
        id: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("class {class}: {source}")]
    Class {
        class: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn non_finite(context: impl Into<String>) -> Self {
        Error::NonFinite {
            context: context.into(),
        }
    }

    pub(crate) fn for_image(self, id: usize) -> Self {
        Error::Image {
            id,
            source: Box::new(self),
        }
    }

    pub(crate) fn for_class(self, class: usize) -> Self {
        Error::Class {
            class,
            source: Box::new(self),
        }
    }

    /// Innermost error after stripping image/class context.
    pub fn root(&self) -> &Error {
        match self {
            Error::Image { source, .. } | Error::Class { source, .. } => source.root(),
            other => other,
        }
    }

    /// True for failures of the numerics (divergence, NaN, singular systems)
    /// as opposed to bad input data.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self.root(),
            Error::NonFinite { .. } | Error::RankDeficient { .. } | Error::Diverged { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn ensure_finite(values: &[f64], context: impl FnOnce() -> String) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::non_finite(context()))
    }
}
