use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{kind} is not part of the {space} augment space")]
    KindNotInSpace { kind: &'static str, space: &'static str },

    #[error("magnitude {level} out of range 0..={max}")]
    MagnitudeOutOfRange { level: u32, max: u32 },

    #[error("invalid transform parameter: {0}")]
    InvalidParam(String),

    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("invalid policy: {0}")]
    InvalidPolicy(String),

    #[error("policy syntax error on line {line}: {msg}")]
    PolicySyntax { line: usize, msg: String },

    #[error("transform vector: {0}")]
    TransformVector(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("input {height}x{width} is too small for two pooling stages (min 8x8)")]
    InputTooSmall { height: usize, width: usize },

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("k = {k} out of range 1..={classes}")]
    TopKOutOfRange { k: usize, classes: usize },

    #[error("params file: {0}")]
    ParamsFormat(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
