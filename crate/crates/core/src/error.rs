use alloc::string::String;
use alloc::vec::Vec;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("index {index} out of range (bound {bound}) in {context}")]
    Index {
        context: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("parameter `{0}` has no gradient")]
    MissingGradient(String),
    #[error("mean pooling over an all-false mask")]
    EmptyPool,
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("vocabulary is frozen")]
    VocabFrozen,
    #[error("k-core filtering with k={k} removed every interaction; k is too large for this data")]
    KCoreEmpty { k: usize },
    #[error("sequence of user {user} has length {len}, need at least {min}")]
    SequenceTooShort { user: usize, len: usize, min: usize },
    #[error("requested top-{k} but only {available} candidates remain after exclusion")]
    KTooLarge { k: usize, available: usize },
    #[error("input length {len} exceeds limit {max}")]
    Overlength { len: usize, max: usize },
    #[error("catalog has {items} items, need at least {needed}")]
    CatalogTooSmall { items: usize, needed: usize },
    #[error("non-finite loss at batch {batch} (lr {lr})")]
    NonFiniteLoss { batch: usize, lr: f64 },
    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
