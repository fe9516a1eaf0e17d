use std::io;
use std::path::PathBuf;

use thiserror::Error;

/// Failures while reading IDX digit files or serving glyphs.
#[derive(Debug, Error)]
pub enum MnistError {
    #[error("bad IDX magic {0:#010x} (expected 0x00000801 or 0x00000803)")]
    BadMagic(u32),
    #[error("IDX stream truncated: need {expected} bytes, have {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("unsupported IDX dtype code {0:#04x} (only unsigned byte, 0x08, is supported)")]
    UnsupportedDtype(u8),
    #[error("IDX dimension {0} is zero")]
    ZeroDim(usize),
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("label {0} is not a digit")]
    BadLabel(u8),
    #[error("digit split `{0}` is not loaded")]
    SplitNotLoaded(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("invalid scene config: {0}")]
    InvalidConfig(String),
    #[error("could not place {kind} after {attempts} attempts; the configuration is too dense")]
    PlacementFailure { kind: &'static str, attempts: usize },
    #[error(transparent)]
    Glyph(#[from] MnistError),
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("checksum mismatch in shard {shard}")]
    Checksum { shard: String },
    #[error("unknown split `{0}`")]
    UnknownSplit(String),
    #[error("malformed dataset: {0}")]
    Format(String),
    #[error(transparent)]
    Scene(#[from] SceneError),
}

/// Errors raised by layers, modules and model assembly.
#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("alpha_ed {alpha} with {channels} channels gives fewer than one hidden channel")]
    BadAlpha { alpha: f64, channels: usize },
    #[error("expected {expected} recurrent states, got {actual}")]
    StateCountMismatch { expected: usize, actual: usize },
    #[error("bad model spec: {0}")]
    BadSpec(String),
    #[error("expected a sequence of {expected} frames, got {actual}")]
    WrongSequenceLength { expected: usize, actual: usize },
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("label {0} is outside the class range")]
    LabelOutOfRange(u8),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("training data missing: {0}")]
    DataMissing(String),
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T, (PathBuf, io::Error)>;
}

impl<T> IoContext<T> for io::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T, (PathBuf, io::Error)> {
        self.map_err(|e| (path.into(), e))
    }
}

impl From<(PathBuf, io::Error)> for MnistError {
    fn from((path, source): (PathBuf, io::Error)) -> Self {
        MnistError::Io { path, source }
    }
}

impl From<(PathBuf, io::Error)> for DatasetError {
    fn from((path, source): (PathBuf, io::Error)) -> Self {
        DatasetError::Io { path, source }
    }
}

impl From<(PathBuf, io::Error)> for TrainError {
    fn from((path, source): (PathBuf, io::Error)) -> Self {
        TrainError::Io { path, source }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid experiment config: {0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

impl From<(PathBuf, io::Error)> for ConfigError {
    fn from((path, source): (PathBuf, io::Error)) -> Self {
        ConfigError::Io { path, source }
    }
}
