use thiserror::Error;

use crate::model::{CoreId, ThreadId};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// A telemetry line that does not match the wire format.
    #[error("malformed telemetry line at byte {offset} (field {field}): {reason}")]
    MalformedLine {
        offset: usize,
        field: usize,
        reason: String,
    },

    #[error("thread {0}: instructions retired with zero cycles")]
    InconsistentCounters(ThreadId),

    #[error("thread {0} has no affinity in the plan")]
    UnmappedThread(ThreadId),

    #[error("malformed input: {0}")]
    MalformedInput(String),

    #[error("power fit needs at least two distinct frequencies, got {0}")]
    UnderdeterminedFit(usize),

    #[error("power fit produced a non-physical dynamic coefficient k = {0}")]
    NonPhysicalFit(f64),

    #[error("invalid plan: {0}")]
    InvalidPlan(String),

    #[error("thread {thread} mapped to isolated core {core}")]
    IsolatedTarget { thread: ThreadId, core: CoreId },

    #[error("config error: {0}")]
    Config(String),

    #[error("oracle instance out of bounds: {0}")]
    OracleBounds(String),
}

impl Error {
    /// Process exit code used by the CLI for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::OracleBounds(_) => 2,
            Error::UnderdeterminedFit(_) | Error::NonPhysicalFit(_) => 3,
            Error::MalformedLine { .. }
            | Error::InconsistentCounters(_)
            | Error::MalformedInput(_) => 4,
            Error::UnmappedThread(_) | Error::InvalidPlan(_) | Error::IsolatedTarget { .. } => 1,
        }
    }
}
