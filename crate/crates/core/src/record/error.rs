use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RecordError {
    #[error("record has no pairs")]
    EmptyRecord,
    #[error("duplicate key `{0}`")]
    DuplicateKey(String),
    #[error("record has more than one output pair")]
    MultipleOutputs,
    #[error("invalid key `{name}`: {reason}")]
    InvalidKey { name: String, reason: String },
    #[error("invalid task name `{name}`: {reason}")]
    InvalidTaskName { name: String, reason: String },
    #[error("value of `{key}` contains a sentinel marker")]
    SentinelInValue { key: String },
    #[error("value of `{key}` contains the bracket marker `[{marker}]`")]
    MarkerInValue { key: String, marker: String },
    #[error("unknown key `{key}` for task `{task}`")]
    UnknownKey { key: String, task: String },
    #[error("key `{key}` has role {found:?}, schema expects {expected:?}")]
    RoleMismatch {
        key: String,
        expected: super::Role,
        found: super::Role,
    },
    #[error("label `{value}` of `{key}` is not in the label vocabulary")]
    LabelNotInVocab { key: String, value: String },
    #[error("task mismatch: expected `{expected}`, found `{found}`")]
    TaskMismatch { expected: String, found: String },
    #[error("mask index {index} out of range for {len} pairs")]
    MaskOutOfRange { index: usize, len: usize },
    #[error("record already carries masked values")]
    AlreadyMasked,
    #[error("demonstration contains masked values")]
    MaskedDemonstration,
    #[error("malformed rendered text: {0}")]
    Malformed(String),
    #[error("sentinel numbering gap: expected <MASK_{expected}>, found <MASK_{found}>")]
    SentinelGap { expected: usize, found: usize },
    #[error("missing sentinel <MASK_{0}>")]
    MissingSentinel(usize),
    #[error("sentinel order violation: expected <MASK_{expected}>, found <MASK_{found}>")]
    SentinelOrder { expected: usize, found: usize },
    #[error("invalid schema: {0}")]
    InvalidSchema(String),
}
