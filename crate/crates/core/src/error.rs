use thiserror::Error;

use crate::tokenseq::TokenForm;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown word id {0}")]
    UnknownWord(usize),
    #[error("transcript is empty")]
    EmptyTranscript,
    #[error("sample rate mismatch: {0} Hz vs {1} Hz")]
    SampleRateMismatch(u32, u32),
    #[error("{0} signal has zero energy")]
    ZeroEnergy(&'static str),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("noise has {noise} samples but clean has {clean}")]
    NoiseTooShort { noise: usize, clean: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("k-means needs at least k = {k} points, got {n}")]
    TooFewPoints { k: usize, n: usize },
    #[error("expected {expected:?} token sequence, got {got:?}")]
    WrongForm { expected: TokenForm, got: TokenForm },
    #[error("token id {id} outside vocabulary of size {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("CTC target of length {target_len} needs {needed} frames, only {frames} available")]
    InfeasibleTarget {
        target_len: usize,
        needed: usize,
        frames: usize,
    },
    #[error("{dropped} of {total} training pairs are CTC-infeasible")]
    TooManyInfeasible { dropped: usize, total: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Wav(#[from] hound::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
