use thiserror::Error;

use crate::tensor::Shape;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: invalid arguments: {detail}")]
    InvalidSpec { op: &'static str, detail: String },

    #[error("backward: loss must be a scalar, got {0}")]
    NonScalarLoss(Shape),

    #[error("backward: op `{0}` has no backward rule")]
    MissingBackward(String),

    #[error("non-finite value produced by `{0}`")]
    NonFinite(String),

    #[error("layer `{layer}`: {source}")]
    Layer {
        layer: String,
        #[source]
        source: Box<Error>,
    },

    #[error("{0}")]
    Format(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn spec(op: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidSpec { op, detail: detail.into() }
    }

    pub(crate) fn in_layer(self, layer: &str) -> Self {
        match self {
            e @ Error::Layer { .. } => e,
            e => Error::Layer { layer: layer.to_string(), source: Box::new(e) },
        }
    }
}
