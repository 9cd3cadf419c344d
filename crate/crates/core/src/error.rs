use thiserror::Error;

use crate::corpus::CorpusError;
use crate::decode::DecodeError;
use crate::embed::EmbedError;
use crate::encoder::EncoderError;
use crate::eval::EvalError;
use crate::numerics::NumericsError;

/// Pipeline-level failure. [`Error::category`] is the stable one-word tag
/// printed by the command line.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Compatibility(String),
    #[error("{0}")]
    Alignment(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn category(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Compatibility(_) => "compatibility",
            Error::Alignment(_) => "alignment",
            Error::Divergence(_) => "divergence",
            Error::Checkpoint(_) => "checkpoint",
            Error::Corpus(CorpusError::Io(_)) => "io",
            Error::Corpus(_) => "corpus",
            Error::Embed(EmbedError::Io(_)) => "io",
            Error::Embed(EmbedError::MissingSentence(_)) => "alignment",
            Error::Embed(_) => "embedding",
            Error::Encoder(EncoderError::Config(_)) => "config",
            Error::Encoder(EncoderError::Injection(_)) => "alignment",
            Error::Encoder(_) | Error::Numerics(_) => "numerics",
            Error::Decode(_) => "decode",
            Error::Eval(EvalError::Alignment(_)) => "alignment",
            Error::Eval(EvalError::Io(_)) => "io",
            Error::Eval(_) => "eval",
            Error::Io(_) => "io",
        }
    }
}
