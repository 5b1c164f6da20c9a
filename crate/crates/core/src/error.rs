use thiserror::Error;

use crate::diffcore::GraphError;

/// Errors raised by the model components (attention, encoder, MIL, adversary).
#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("cohort id {id} out of range for {cohorts} cohorts")]
    InvalidCohort { id: usize, cohorts: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("bag has no instances")]
    EmptyBag,
    #[error("batch of {0} is too small, need at least 2")]
    BatchTooSmall(usize),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("all sample weights are zero")]
    ZeroWeights,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid data: {0}")]
    Data(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;
