use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("degenerate mask in {op}: a row has no valid entry")]
    DegenerateMask { op: &'static str },
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("index {index} out of range in {op} (limit {limit})")]
    Index {
        op: &'static str,
        index: usize,
        limit: usize,
    },
    #[error("invalid audio slices: {0}")]
    Slice(String),
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("invalid record: {0}")]
    InvalidRecord(String),
    #[error("negative sampling failed: {0}")]
    Sampling(String),
    #[error("candidate set construction failed: {0}")]
    Construction(String),
    #[error("non-finite loss {loss} at batch {batch} (global parameter norm {param_norm})")]
    NonFiniteLoss {
        batch: usize,
        loss: f64,
        param_norm: f64,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Dimension {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}
