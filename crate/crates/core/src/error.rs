use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid emotion polarity {0} (expected one of -1, -0.5, 0, 0.5, 1)")]
    InvalidPolarity(f64),

    #[error("invalid emotion class index {0} (expected 0..=4)")]
    InvalidClassIndex(usize),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("duplicate utterance id {id:?} on lines {first} and {second}")]
    DuplicateId { id: String, first: usize, second: usize },

    #[error("alignment row {row}: {message}")]
    Alignment { row: usize, message: String },

    #[error("corpus too small: need more than {needed} utterances, got {got} (short by {})", needed + 1 - got)]
    CorpusTooSmall { needed: usize, got: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid audio: {0}")]
    Audio(String),

    #[error("shape mismatch in {tensor}: {message}")]
    Shape { tensor: String, message: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("phoneme id {id} out of vocabulary (size {vocab})")]
    OutOfVocabulary { id: usize, vocab: usize },

    #[error("unknown speaker {0:?}")]
    UnknownSpeaker(String),

    #[error("non-finite values in {0}")]
    NonFinite(String),

    #[error("non-finite loss at step {step} in term {term} (max |grad| {max_grad:e})")]
    NonFiniteLoss {
        step: u64,
        term: &'static str,
        max_grad: f64,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config hash mismatch (checkpoint {stored}, expected {expected}): {diff}")]
    ConfigMismatch {
        stored: String,
        expected: String,
        diff: String,
    },

    #[error("file not found: {}", .0.display())]
    NotFound(PathBuf),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("wav: {0}")]
    Wav(#[from] hound::Error),

    #[error("image: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    /// Maps an open failure to [`Error::NotFound`] when the file is missing.
    pub fn open(path: &std::path::Path, source: std::io::Error) -> Self {
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::NotFound(path.to_path_buf())
        } else {
            Error::io(path.display().to_string(), source)
        }
    }

    pub fn shape(tensor: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Shape {
            tensor: tensor.into(),
            message: message.into(),
        }
    }

    /// Short machine-readable tag for CLI error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidPolarity(_) | Error::InvalidClassIndex(_) => "polarity",
            Error::Parse { .. } | Error::DuplicateId { .. } => "manifest",
            Error::Alignment { .. } => "alignment",
            Error::CorpusTooSmall { .. } => "corpus",
            Error::Config(_) => "config",
            Error::Audio(_) | Error::Wav(_) => "audio",
            Error::Shape { .. } => "shape",
            Error::Contract(_) => "contract",
            Error::OutOfVocabulary { .. } => "vocabulary",
            Error::UnknownSpeaker(_) => "speaker",
            Error::NonFinite(_) | Error::NonFiniteLoss { .. } => "numeric",
            Error::Checkpoint(_) | Error::ConfigMismatch { .. } => "checkpoint",
            Error::NotFound(_) => "not-found",
            Error::Io { .. } => "io",
            Error::Image(_) => "image",
        }
    }
}
