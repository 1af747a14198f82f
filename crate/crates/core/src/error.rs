use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed json in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("manifest record {index}: {reason}")]
    MalformedRecord { index: usize, reason: String },

    #[error("manifest record {index}: dangling uri {uri}")]
    DanglingUri { index: usize, uri: String },

    #[error("corrupt sample header in {path}: {reason}")]
    CorruptHeader { path: PathBuf, reason: String },

    #[error("image is {image_h}x{image_w} but mask is {mask_h}x{mask_w}")]
    DimensionMismatch {
        image_h: usize,
        image_w: usize,
        mask_h: usize,
        mask_w: usize,
    },

    #[error("invalid mask label {value} (allowed 0..=3)")]
    InvalidLabel { value: u8 },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("zoom to {height}x{width} is below the 8x8 minimum")]
    DegenerateZoom { height: usize, width: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("corrupt factor bank: {0}")]
    CorruptBank(String),

    #[error("empty factor bank: {0}")]
    EmptyBank(&'static str),

    #[error("no labeled data available for training")]
    NoLabeledData,

    #[error("empty {0} pool")]
    EmptyPool(&'static str),

    #[error("training diverged: non-finite {term} loss")]
    NonFiniteLoss { term: &'static str },

    #[error("training diverged at epoch {epoch}, step {step}: {source}")]
    Diverged {
        epoch: usize,
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("record {index} ({subject_id}) has no mask; evaluation needs ground truth")]
    MissingMask { index: usize, subject_id: String },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|source| Error::Io {
            path: path.into(),
            source,
        })
    }
}
