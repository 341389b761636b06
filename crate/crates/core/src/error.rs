use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by the inversion engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by `{op}` (node {node})")]
    NonFinite { op: &'static str, node: usize },

    #[error("non-finite loss at step {step}")]
    Diverged { step: usize },

    #[error("inversion diverged at step {step}")]
    InversionDiverged {
        step: usize,
        /// Weights before the failing step.
        last_good: Box<crate::inr::INRWeights>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate anchor: parameter vector has zero norm")]
    DegenerateAnchor,

    #[error("store has {available} entries but {requested} were requested; use a smaller value")]
    StoreTooSmall { requested: usize, available: usize },

    #[error("dataset store is empty")]
    EmptyStore,

    #[error("encoder fingerprint mismatch: store was built with {store}, active encoder is {active}")]
    FingerprintMismatch { store: String, active: String },

    #[error("missing tensor `{0}`")]
    MissingTensor(String),

    #[error("tensor `{name}` has shape {actual:?}, expected {expected:?}")]
    TensorShape {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("fixture mismatch: coordinate {index} differs by {error:.3e} (tolerance {tolerance:.1e})")]
    FixtureMismatch {
        index: usize,
        error: f64,
        tolerance: f64,
    },

    #[error("encoder has no text tower")]
    NoTextTower,

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            what,
            detail: detail.into(),
        }
    }

    /// True for failures caused by numerics rather than inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. }
                | Error::Diverged { .. }
                | Error::InversionDiverged { .. }
                | Error::DegenerateAnchor
        )
    }
}
