use thiserror::Error;

use crate::addr::Address;

/// Which input file a parse error came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputKind {
    Policy,
    SymbolMap,
    Scenario,
    CostTable,
}

impl std::fmt::Display for InputKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            InputKind::Policy => "policy",
            InputKind::SymbolMap => "symbol map",
            InputKind::Scenario => "scenario",
            InputKind::CostTable => "cost table",
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SimError {
    #[error("address {0} is not page aligned")]
    Unaligned(Address),

    #[error("{kind} line {line}: {message}")]
    Parse {
        kind: InputKind,
        line: usize,
        message: String,
    },

    #[error("duplicate compartment id {0}")]
    DuplicateCompartment(usize),

    #[error("policy does not define the default compartment (cmpt_id 0)")]
    MissingDefaultCompartment,

    #[error("unknown symbol `{0}`")]
    UnknownSymbol(String),

    #[error("compartment {source_cmpt}: can_call `{callee}` names unknown compartment {target}")]
    UnknownTarget {
        source_cmpt: usize,
        callee: String,
        target: usize,
    },

    #[error("compartment {0}: can_call `{1}` targets its own compartment")]
    SelfCall(usize, String),

    #[error("can_call `{callee}` from compartment {source_cmpt} is ambiguous between compartments {candidates:?}")]
    AmbiguousCallTarget {
        source_cmpt: usize,
        callee: String,
        candidates: Vec<usize>,
    },

    #[error("compartments {0} and {1} claim the same execution context")]
    ContextConflict(usize, usize),

    #[error("EPTP list capacity exceeded: {0} compartments requested, at most 512 supported")]
    EptpCapacity(usize),

    #[error("sentry row for compartment {0} does not fit in one page")]
    RowCapacity(usize),

    #[error("layout check failed: {0}")]
    Layout(String),

    #[error("symbol `{0}` overlaps the simulator's reserved region")]
    ReservedOverlap(String),

    #[error("magic constant collides with mapped page {0}")]
    MagicCollision(Address),

    #[error("invalid interrupt injection: {0}")]
    InvalidInjection(String),

    #[error("scenario error: {0}")]
    Scenario(String),

    #[error("model consistency error: {0}")]
    ModelMismatch(String),

    #[error("invalid workload: {0}")]
    Workload(String),
}

pub type Result<T, E = SimError> = std::result::Result<T, E>;

pub(crate) fn parse_err(kind: InputKind, line: usize, message: impl Into<String>) -> SimError {
    SimError::Parse {
        kind,
        line,
        message: message.into(),
    }
}
