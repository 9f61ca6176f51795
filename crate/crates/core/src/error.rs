use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape {0:?}: extents must be positive")]
    InvalidShape(Vec<usize>),

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("input `{0}` is not bound")]
    UnboundInput(String),

    #[error("no node labelled `{0}`")]
    UnknownLabel(String),

    #[error("tape does not belong to this graph or forward has not completed")]
    TapeMismatch,

    #[error("graph output must be a scalar, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),

    #[error("pixel {index} sits on a kink of the objective")]
    KinkPixel { index: usize },

    #[error("input value {value} at {index} is outside [-1, 1]")]
    OutOfRange { index: usize, value: f64 },

    #[error("idx format: {0}")]
    Idx(String),

    #[error("network spec: {0}")]
    NetSpec(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for failures caused by NaN/Inf arithmetic rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFinite(_) | Error::Diverged { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
