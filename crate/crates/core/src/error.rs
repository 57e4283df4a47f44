//! Error type shared across the library.

use thiserror::Error;

/// Errors produced by any patchlens operation.
#[derive(Debug, Error)]
pub enum Error {
    /// Dimension or shape mismatch between operands.
    #[error("shape error: {0}")]
    Shape(String),

    /// A model, tokenizer, or image file failed to load or validate.
    #[error("load error: {0}")]
    Load(String),

    /// Text could not be segmented with the tokenizer vocabulary.
    #[error("tokenization error: no vocab entry covers {0:?}")]
    Tokenize(char),

    /// A text embedding with zero norm cannot define a projection direction.
    #[error("degenerate direction: text embedding has zero norm")]
    DegenerateDirection,

    /// A metric is undefined for the given input (e.g. empty or single-class).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// Before/after runs do not cover the same images.
    #[error("misaligned runs: {0}")]
    MisalignedRuns(String),

    /// Sequence length would exceed the model's maximum.
    #[error("sequence overflow: length {len} exceeds max_seq {max}")]
    SequenceOverflow { len: usize, max: usize },

    /// Intervention or extraction layer outside {-1, 1..=L}.
    #[error("layer {layer} out of range for model with {n_layers} layers")]
    LayerOutOfRange { layer: i32, n_layers: usize },

    /// Configuration or input validation failure.
    #[error("invalid input: {0}")]
    Invalid(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
