use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("svd did not converge after {sweeps} sweeps ({rows}x{cols}, max |a| = {max_abs:e}, off-diagonal residual {residual:e})")]
    SvdNoConvergence {
        sweeps: usize,
        rows: usize,
        cols: usize,
        max_abs: f64,
        residual: f64,
    },

    #[error("degenerate labels: {0}")]
    DegenerateLabels(String),

    #[error("singular system: {0}")]
    Singular(String),

    #[error("token {token} out of vocabulary (size {vocab})")]
    TokenOutOfVocab { token: u32, vocab: usize },

    #[error("layer {layer} out of range (model has {n_layers} layers)")]
    LayerOutOfRange { layer: usize, n_layers: usize },

    #[error("weight file: {0}")]
    Format(String),

    #[error("missing parameter `{0}`")]
    MissingParam(String),

    #[error("unknown tensor `{0}`")]
    UnknownTensor(String),

    #[error("non-finite loss at {0}")]
    NonFiniteLoss(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
