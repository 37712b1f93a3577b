use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("index {index} out of range (limit {limit}) for {what}")]
    Index {
        what: &'static str,
        index: usize,
        limit: usize,
    },
    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("task {task} has {available} distinct inputs but {needed} were requested")]
    Capacity {
        task: String,
        needed: usize,
        available: usize,
    },
    #[error("training diverged at step {step}: loss is not finite")]
    Diverged { step: usize },
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("unknown task {0:?}")]
    UnknownTask(String),
}
