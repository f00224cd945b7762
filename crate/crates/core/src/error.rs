use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch, matrix is {rows}x{cols} but vector has length {len}")]
    MatVecShape {
        op: &'static str,
        rows: usize,
        cols: usize,
        len: usize,
    },

    #[error("{what}: expected length {expected}, got {actual}")]
    Length {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("non-finite value {value} at index {index}")]
    NonFinite { index: usize, value: f64 },

    #[error("class index {index} out of range for {n_classes} classes")]
    ClassIndex { index: usize, n_classes: usize },

    #[error("invalid architecture: {0}")]
    Architecture(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("layer {layer} weight ({row}, {col}) = {value} lies outside [-1, 1]")]
    WeightOutOfRange {
        layer: usize,
        row: usize,
        col: usize,
        value: f64,
    },

    #[error("layer {prev} outputs {prev_out} values but layer {next} expects {next_in} inputs")]
    ChainMismatch {
        prev: usize,
        prev_out: usize,
        next: usize,
        next_in: usize,
    },

    #[error("model file: bad magic, expected \"SCANN\"")]
    BadMagic,

    #[error("model file: unsupported format version {found} (supported: {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("{context}: truncated while reading {what}")]
    Truncated { context: &'static str, what: &'static str },

    #[error("model file: {0}")]
    Malformed(String),

    #[error("idx file {path}: bad magic 0x{found:08x}, expected 0x{expected:08x}")]
    IdxMagic { path: PathBuf, found: u32, expected: u32 },

    #[error("idx: images file holds {images} items but labels file holds {labels}")]
    IdxCountMismatch { images: usize, labels: usize },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("{0}")]
    Analytics(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
