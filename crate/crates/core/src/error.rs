use thiserror::Error;

/// Errors surfaced by the simulator.
///
/// Most variants correspond to hard contract violations (bad addresses,
/// illegal command sequences). `FallbackToCpu` is a control signal rather
/// than a failure: the memory controller catches it and reroutes the
/// operation to the CPU path.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("address {addr:#x} outside {what} bound {bound:#x}")]
    AddressRange {
        addr: u64,
        bound: u64,
        what: &'static str,
    },

    #[error("non-finite or out-of-domain value in analog computation: {0}")]
    NumericDomain(String),

    #[error("sense amplifier saw zero bitline deviation (bit {bit})")]
    MetastableSense { bit: u64 },

    #[error("command dropped: {0}")]
    CommandDropped(String),

    #[error("no open row in bank {bank}")]
    NoOpenRow { bank: u64 },

    #[error("TRANSFER source and destination banks are the same")]
    SameBankTransfer,

    #[error("rows {a} and {b} do not share a subarray")]
    SubarrayMismatch { a: u64, b: u64 },

    #[error("source and destination rows are identical")]
    SameRow,

    #[error("cell restored {age_ns} ns ago exceeds retention window {window_ns} ns")]
    StaleCell { age_ns: f64, window_ns: f64 },

    #[error("row {row} is reserved and cannot be a user target")]
    ReservedRowTarget { row: u64 },

    #[error("bitwise operation requires row-aligned, row-sized operands: {0}")]
    RowRequired(String),

    #[error("operation requires three PSM hops; complete on the CPU")]
    FallbackToCpu,

    #[error("no energy entry for ({op}, {mechanism})")]
    UnknownMechanism { op: String, mechanism: String },

    #[error("energy calibration failed: {0}")]
    CalibrationFailed(String),

    #[error("all page pools are empty")]
    NoPoolPage,

    #[error("page fault at {addr:#x}")]
    PageFault { addr: u64 },

    #[error("bit vectors differ in length ({a} vs {b})")]
    LengthMismatch { a: usize, b: usize },

    #[error("invalid workload parameters: {0}")]
    InvalidWorkload(String),

    #[error("trace parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error("trace op {index} failed: {source}")]
    TraceExec { index: usize, source: Box<Error> },

    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;
