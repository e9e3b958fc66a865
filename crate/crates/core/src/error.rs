//! Error type shared across the engine.

use thiserror::Error;

/// Errors produced anywhere in the engine.
#[derive(Debug, Error)]
pub enum Error {
    /// A model spec failed shape propagation or structural validation.
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),

    /// Shape propagation failed at a specific layer.
    #[error("shape error at layer {index} ({kind}): {message}")]
    Shape {
        index: usize,
        kind: String,
        message: String,
    },

    /// A forward or backward pass produced NaN or Inf.
    #[error("non-finite value in {context} at layer {layer_index}")]
    NonFinite { context: String, layer_index: usize },

    /// Training loss became NaN or Inf.
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    /// A noise standard deviation was negative.
    #[error("sigma must be non-negative, got {0}")]
    NegativeSigma(f64),

    /// An argument violated a precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A collection that must be non-empty was empty.
    #[error("empty input: {0}")]
    Empty(String),

    /// Metric precondition violated (degenerate series, zero base, ...).
    #[error("metric error: {0}")]
    Metric(String),

    /// Experiment configuration failed validation; the message names the field.
    #[error("config error: {0}")]
    Config(String),

    /// Dataset file problems (missing files, wrong record length, ...).
    #[error("data error: {0}")]
    Data(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
