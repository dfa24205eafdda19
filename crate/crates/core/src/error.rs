use thiserror::Error;

use crate::ids::JobId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum Error {
    // registry
    #[error("unknown {kind} reference '{id}'")]
    UnknownReference { kind: &'static str, id: String },
    #[error("duplicate {kind} id '{id}'")]
    DuplicateId { kind: &'static str, id: String },
    #[error("malformed: {0}")]
    Malformed(String),
    #[error("unknown purpose '{0}'")]
    UnknownPurpose(String),
    #[error("unknown system '{0}'")]
    UnknownSystem(String),
    #[error("system '{0}' is inactive")]
    InactiveSystem(String),

    // policy
    #[error("data timestamp {data} is later than now {now}")]
    TimestampOrder { data: i64, now: i64 },

    // workflow
    #[error("unknown request '{0}'")]
    UnknownRequest(String),
    #[error("unknown sub-task '{0}'")]
    UnknownSubTask(String),
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("invalid transition: {0}")]
    InvalidTransition(String),
    #[error("reviewer '{0}' submitted the request and cannot review it")]
    SelfApproval(String),
    #[error("reviewer '{0}' has already reviewed this request")]
    DuplicateReviewer(String),
    #[error("request '{0}' has already been expanded into sub-tasks")]
    AlreadyExpanded(String),
    #[error("malformed evidence: {0}")]
    MalformedEvidence(String),

    // management
    #[error("job '{0}' already enqueued")]
    DuplicateJob(JobId),
    #[error("unknown job '{0}'")]
    UnknownJob(String),
    #[error("runner not authorized for system '{0}'")]
    Unauthorized(String),
    #[error("runner '{runner}' does not hold the claim on job '{job}'")]
    NotClaimHolder { job: String, runner: String },
    #[error("step {step} is not after last reported step {last}")]
    StaleStep { step: u32, last: u32 },

    // plugins and fleet
    #[error("plugin {name} {version} already published")]
    DuplicateVersion { name: String, version: String },
    #[error("checksum mismatch for plugin {name} {version}")]
    ChecksumMismatch { name: String, version: String },
    #[error("no published version of '{name}' satisfies '{req}'")]
    NoMatchingVersion { name: String, req: String },
    #[error("malformed fleet spec: {0}")]
    MalformedSpec(String),

    // store
    #[error("audit chain mismatch: expected prev_hash {expected}, got {got}")]
    ChainMismatch { expected: String, got: String },
    #[error("i/o failure: {0}")]
    Io(String),
    #[error("corrupt log at seq {seq}: {reason}")]
    CorruptLog { seq: u64, reason: String },
    #[error("range {from}..{to} is outside the log (len {len})")]
    RangeOutOfBounds { from: u64, to: u64, len: u64 },
    /// Raised by an armed crash point in simulation; nothing was written.
    #[error("service crashed before seq {0} could be written")]
    Crashed(u64),

    // executor
    #[error("registry unavailable: {0}")]
    RegistryUnavailable(String),
    #[error("management unavailable: {0}")]
    ManagementUnavailable(String),
    #[error("scenario invalid: {0}")]
    ScenarioInvalid(String),
    #[error("invariant violated: {0}")]
    InvariantViolation(String),
}

impl Error {
    /// Errors that mean the service itself can no longer make progress, as
    /// opposed to a rejected command.
    pub fn is_fatal(&self) -> bool {
        matches!(self, Error::Crashed(_) | Error::Io(_) | Error::ChainMismatch { .. })
    }

    /// Stable machine-readable name of the variant.
    pub fn code(&self) -> &'static str {
        match self {
            Error::UnknownReference { .. } => "UnknownReference",
            Error::DuplicateId { .. } => "DuplicateId",
            Error::Malformed(_) => "Malformed",
            Error::UnknownPurpose(_) => "UnknownPurpose",
            Error::UnknownSystem(_) => "UnknownSystem",
            Error::InactiveSystem(_) => "InactiveSystem",
            Error::TimestampOrder { .. } => "TimestampOrder",
            Error::UnknownRequest(_) => "UnknownRequest",
            Error::UnknownSubTask(_) => "UnknownSubTask",
            Error::InvalidState(_) => "InvalidState",
            Error::InvalidTransition(_) => "InvalidTransition",
            Error::SelfApproval(_) => "SelfApproval",
            Error::DuplicateReviewer(_) => "DuplicateReviewer",
            Error::AlreadyExpanded(_) => "AlreadyExpanded",
            Error::MalformedEvidence(_) => "MalformedEvidence",
            Error::DuplicateJob(_) => "DuplicateJob",
            Error::UnknownJob(_) => "UnknownJob",
            Error::Unauthorized(_) => "Unauthorized",
            Error::NotClaimHolder { .. } => "NotClaimHolder",
            Error::StaleStep { .. } => "StaleStep",
            Error::DuplicateVersion { .. } => "DuplicateVersion",
            Error::ChecksumMismatch { .. } => "ChecksumMismatch",
            Error::NoMatchingVersion { .. } => "NoMatchingVersion",
            Error::MalformedSpec(_) => "MalformedSpec",
            Error::ChainMismatch { .. } => "ChainMismatch",
            Error::Io(_) => "Io",
            Error::CorruptLog { .. } => "CorruptLog",
            Error::RangeOutOfBounds { .. } => "RangeOutOfBounds",
            Error::Crashed(_) => "Crashed",
            Error::RegistryUnavailable(_) => "RegistryUnavailable",
            Error::ManagementUnavailable(_) => "ManagementUnavailable",
            Error::ScenarioInvalid(_) => "ScenarioInvalid",
            Error::InvariantViolation(_) => "InvariantViolation",
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
