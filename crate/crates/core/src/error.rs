use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, UmoeError>;

#[derive(Debug, Error)]
pub enum UmoeError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("unknown preset: {0}")]
    UnknownPreset(String),

    #[error("config parse error at line {line}: {message}")]
    ConfigParse { line: usize, message: String },

    #[error("top-k of {k} exceeds expert count {n}")]
    KTooLarge { k: usize, n: usize },

    #[error("non-finite input")]
    NonFiniteInput,

    #[error("empty routing batch")]
    EmptyBatch,

    #[error("rotary embedding needs an even dimension, got {0}")]
    OddDim(usize),

    #[error("attention over an empty key set")]
    EmptyKeys,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("context overflow: position {position} with context length {context_len}")]
    ContextOverflow { position: usize, context_len: usize },

    #[error("expert index {index} out of range for {len} experts")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("token id {id} out of vocabulary of size {vocab}")]
    TokenOutOfVocab { id: u32, vocab: usize },

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("unknown expert {expert} in layer {layer} ({sublayer})")]
    UnknownExpert {
        layer: usize,
        sublayer: String,
        expert: usize,
    },

    #[error("position {position} out of range for {len} tokens")]
    PositionOutOfRange { position: usize, len: usize },

    #[error("bad magic bytes")]
    BadMagic,

    #[error("corpus id {id} out of vocabulary of size {vocab}")]
    IdOutOfVocab { id: u32, vocab: usize },

    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("corpus of {len} tokens is shorter than the context length {context_len}")]
    CorpusTooSmall { len: usize, context_len: usize },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl UmoeError {
    /// Stable machine-readable name of the error variant.
    pub fn kind(&self) -> &'static str {
        match self {
            UmoeError::InvalidConfig(_) => "InvalidConfig",
            UmoeError::UnknownPreset(_) => "UnknownPreset",
            UmoeError::ConfigParse { .. } => "ConfigParse",
            UmoeError::KTooLarge { .. } => "KTooLarge",
            UmoeError::NonFiniteInput => "NonFiniteInput",
            UmoeError::EmptyBatch => "EmptyBatch",
            UmoeError::OddDim(_) => "OddDim",
            UmoeError::EmptyKeys => "EmptyKeys",
            UmoeError::ShapeMismatch(_) => "ShapeMismatch",
            UmoeError::ContextOverflow { .. } => "ContextOverflow",
            UmoeError::IndexOutOfRange { .. } => "IndexOutOfRange",
            UmoeError::TokenOutOfVocab { .. } => "TokenOutOfVocab",
            UmoeError::LengthMismatch { .. } => "LengthMismatch",
            UmoeError::UnknownExpert { .. } => "UnknownExpert",
            UmoeError::PositionOutOfRange { .. } => "PositionOutOfRange",
            UmoeError::BadMagic => "BadMagic",
            UmoeError::IdOutOfVocab { .. } => "IdOutOfVocab",
            UmoeError::UnsupportedVersion(_) => "UnsupportedVersion",
            UmoeError::CorruptCheckpoint(_) => "CorruptCheckpoint",
            UmoeError::CorpusTooSmall { .. } => "CorpusTooSmall",
            UmoeError::Io(_) => "Io",
        }
    }
}
