use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("duplicate class `{0}`")]
    DuplicateClass(String),
    #[error("unknown class `{0}`")]
    UnknownClass(String),
    #[error("{remaining} classes remain after taking {base} base classes; not divisible into {way}-way sessions ({leftover} left over)")]
    UnevenSplit {
        base: usize,
        remaining: usize,
        way: usize,
        leftover: usize,
    },
    #[error("class `{class}` has {available} instances, {needed} required")]
    InsufficientInstances {
        class: String,
        needed: usize,
        available: usize,
    },
    #[error("label/token length mismatch: {tokens} tokens, {labels} labels")]
    LengthMismatch { tokens: usize, labels: usize },
    #[error("malformed label `{label}` at position {position}")]
    InvalidLabel { position: usize, label: String },
    #[error("`{label}` at position {position} does not continue a span of the same class")]
    InvalidBio { position: usize, label: String },
    #[error("sequence of {len} tokens exceeds max length {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("class `{0}` appears in the query set but not in the support set")]
    MissingSupportClass(String),
    #[error("session {m} outside 1..={total}")]
    SessionOutOfRange { m: usize, total: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("missing snapshot: {0}")]
    MissingSnapshot(String),
    #[error("training diverged at step {step} ({stage})")]
    Diverged { stage: &'static str, step: usize },
}
