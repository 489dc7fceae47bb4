use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised by the pure merge, search and metric routines.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("tensor `{name}`: data length {len} does not match shape {shape:?}")]
    DataLength {
        name: String,
        shape: Vec<usize>,
        len: usize,
    },
    #[error("tensor `{name}` contains non-finite values")]
    NonFinite { name: String },
    #[error("map {map_index} is missing tensor `{name}`")]
    MissingKey { map_index: usize, name: String },
    #[error("map {map_index}: tensor `{name}` has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        map_index: usize,
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("task vectors are defined over different merge domains")]
    DomainMismatch,
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("candidate {index} has non-finite fitness {value}")]
    NonFiniteFitness { index: usize, value: f64 },
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}
