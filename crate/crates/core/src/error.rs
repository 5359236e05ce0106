use thiserror::Error;

pub type Result<T> = std::result::Result<T, DodeError>;

#[derive(Debug, Error)]
pub enum DodeError {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// A quantity had to be divided by a vanishing noise level.
    #[error("division guard: {0}")]
    DivisionGuard(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("degenerate Lagrange basis: duplicate node {0}")]
    DegenerateLagrange(f64),

    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },

    #[error("non-finite values at step {step}: {what}")]
    NonFinite { step: usize, what: String },

    #[error("step {step} failed: {source}")]
    Step {
        step: usize,
        #[source]
        source: Box<DodeError>,
    },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl DodeError {
    /// True for errors that come from bad user input rather than a numerical failure.
    pub fn is_config(&self) -> bool {
        match self {
            DodeError::Config(_)
            | DodeError::Unsupported(_)
            | DodeError::Format(_)
            | DodeError::Json(_)
            | DodeError::Io(_)
            | DodeError::ShapeMismatch { .. } => true,
            DodeError::Step { source, .. } => source.is_config(),
            _ => false,
        }
    }

    pub(crate) fn at_step(self, step: usize) -> Self {
        match self {
            e @ DodeError::Step { .. } => e,
            e @ DodeError::NonFinite { .. } => e,
            e => DodeError::Step {
                step,
                source: Box::new(e),
            },
        }
    }
}
