//! Crate-wide error type.
//!
//! Every variant maps to a stable machine-parsable kind token; the CLI
//! prefixes failures with `xlmk-error: <kind>` on stderr.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, XlmkError>;

#[derive(Debug, Error)]
pub enum XlmkError {
    // kb / parsing
    #[error("malformed record at {path}:{line}: {detail}")]
    MalformedRecord {
        path: String,
        line: usize,
        detail: String,
    },
    #[error("duplicate entity id {0}")]
    DuplicateEntityId(String),
    #[error("unresolved entity id {id} referenced by {context}")]
    UnresolvedEntityId { id: String, context: String },
    #[error("invalid language code {0:?}")]
    InvalidLanguageCode(String),
    #[error("invalid mention [{s}, {t}] in sentence of length {len}")]
    InvalidMention { s: usize, t: usize, len: usize },
    #[error("entity {0} has no description")]
    NoDescription(String),
    #[error("empty description")]
    EmptyDescription,
    #[error("invalid world config: {0}")]
    InvalidWorldConfig(String),

    // text pipeline
    #[error("empty corpus: nothing to build a vocabulary from")]
    EmptyCorpus,
    #[error("missing {lang} label for entity {entity}")]
    MissingLabel { entity: String, lang: String },
    #[error("answer label for entity {0} is not a single token")]
    MultiTokenAnswer(String),
    #[error("cloze answer {0:?} is not in the vocabulary")]
    AnswerOutOfVocab(String),

    // encoder / autodiff
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("sequence of length {len} exceeds max_len {max_len}")]
    SequenceTooLong { len: usize, max_len: usize },
    #[error("token id {id} out of range for vocab of size {vocab}")]
    IdOutOfRange { id: usize, vocab: usize },
    #[error("relation index {index} out of range ({n_relations} relations)")]
    IndexOutOfRange { index: usize, n_relations: usize },
    #[error("backward called twice on the same tape")]
    GraphConsumed,

    // queue / objectives
    #[error("queue capacity must be >= 1")]
    InvalidCapacity,
    #[error("vector width {got} does not match queue width {want}")]
    WidthMismatch { got: usize, want: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("instance skipped: no surviving negatives")]
    SkippedInstance,
    #[error("MLM instance has no masked positions")]
    EmptyMask,
    #[error("all task batches are empty")]
    AllBatchesEmpty,

    // trainer
    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(String),
    #[error("data exhausted for task {0}")]
    DataExhausted(&'static str),

    // probe
    #[error("empty probe item set")]
    EmptyItemSet,
    #[error("empty candidate pool")]
    EmptyPool,

    // cli / config
    #[error("unknown command {0:?}")]
    UnknownCommand(String),
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("unrecognized artifact at {path}: {detail}")]
    UnrecognizedArtifact { path: String, detail: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl XlmkError {
    /// Stable kind token used for the `xlmk-error:` CLI prefix.
    pub fn kind(&self) -> &'static str {
        use XlmkError::*;
        match self {
            MalformedRecord { .. } => "MalformedRecord",
            DuplicateEntityId(_) => "DuplicateEntityId",
            UnresolvedEntityId { .. } => "UnresolvedEntityId",
            InvalidLanguageCode(_) => "InvalidLanguageCode",
            InvalidMention { .. } => "InvalidMention",
            NoDescription(_) => "NoDescription",
            EmptyDescription => "EmptyDescription",
            InvalidWorldConfig(_) => "InvalidWorldConfig",
            EmptyCorpus => "EmptyCorpus",
            MissingLabel { .. } => "MissingLabel",
            MultiTokenAnswer(_) => "MultiTokenAnswer",
            AnswerOutOfVocab(_) => "AnswerOutOfVocab",
            InvalidConfig(_) => "InvalidConfig",
            SequenceTooLong { .. } => "SequenceTooLong",
            IdOutOfRange { .. } => "IdOutOfRange",
            IndexOutOfRange { .. } => "IndexOutOfRange",
            GraphConsumed => "GraphConsumed",
            InvalidCapacity => "InvalidCapacity",
            WidthMismatch { .. } => "WidthMismatch",
            NonFinite(_) => "NonFinite",
            SkippedInstance => "SkippedInstance",
            EmptyMask => "EmptyMask",
            AllBatchesEmpty => "AllBatchesEmpty",
            NonFiniteGradient(_) => "NonFiniteGradient",
            DataExhausted(_) => "DataExhausted",
            EmptyItemSet => "EmptyItemSet",
            EmptyPool => "EmptyPool",
            UnknownCommand(_) => "UnknownCommand",
            ConfigInvalid(_) => "ConfigInvalid",
            UnrecognizedArtifact { .. } => "UnrecognizedArtifact",
            Io { .. } => "Io",
        }
    }

    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        XlmkError::Io {
            path: path.into(),
            source,
        }
    }
}
