use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::Shape;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("loss must be a scalar, got shape {0}")]
    NotScalar(Shape),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("bad magic: not a PCSAVOL1 volume file")]
    BadMagic,
    #[error("unsupported dtype tag {0:?}")]
    BadDtype(String),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("payload of {found} bytes does not match header dims ({expected} bytes)")]
    PayloadMismatch { expected: usize, found: usize },
    #[error("train/val/test splits overlap on seed {0}")]
    OverlappingSplit(u64),
    #[error("missing split `{0}`")]
    MissingSplit(String),
    #[error("refusing to overwrite existing output at {}", .0.display())]
    AlreadyExists(PathBuf),
    #[error("checkpoint fingerprint {found} does not match configuration fingerprint {expected}")]
    FingerprintMismatch { expected: String, found: String },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("non-finite loss at step {step} (batch seeds {seeds:?}): {detail}")]
    NonFiniteLoss { step: u64, seeds: Vec<u64>, detail: String },
    #[error("empty input: {0}")]
    Empty(String),
    #[error("{}: {source}", .path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("toml parse error: {0}")]
    TomlDe(#[from] toml::de::Error),
    #[error("toml serialize error: {0}")]
    TomlSer(#[from] toml::ser::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.into();
        move |source| Error::Io { path, source }
    }
}
