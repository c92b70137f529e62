use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TopologyError {
    #[error("{field} = {value} is not a nonzero power of two")]
    NotPowerOfTwo { field: &'static str, value: usize },
    #[error("level latencies must be strictly increasing from tile-local to remote")]
    LatencyOrder,
    #[error("L1 address needs {bits} bits, more than 32")]
    AddressTooWide { bits: u32 },
    #[error("PE {pe} out of range (cluster has {total})")]
    PeOutOfRange { pe: usize, total: usize },
    #[error("bank {bank} out of range (cluster has {total})")]
    BankOutOfRange { bank: usize, total: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RemapError {
    #[error("address {addr:#x} is outside the {limit:#x}-byte L1")]
    OutOfL1 { addr: u64, limit: u64 },
    #[error("address {addr:#x} is outside region [{base:#x}, {end:#x})")]
    OutsideRegion { addr: u64, base: u64, end: u64 },
    #[error("invalid mapping config: {0}")]
    BadConfig(String),
    #[error("regions [{a_base:#x}, {a_end:#x}) and [{b_base:#x}, {b_end:#x}) overlap")]
    Overlap { a_base: u64, a_end: u64, b_base: u64, b_end: u64 },
    #[error("source and destination lengths differ ({src} vs {dst})")]
    LengthMismatch { src: u64, dst: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AllocError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("out of memory: no free block fits {size} bytes aligned to {align}")]
    OutOfMemory { size: u64, align: u64 },
    #[error("{addr:#x} is not the base of a live allocation")]
    InvalidFree { addr: u64 },
    #[error("region registry full ({limit} live regions)")]
    RegionLimit { limit: usize },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum KernelError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("allocation failed while planning: {0}")]
    Alloc(#[from] AllocError),
    #[error("mapping error while planning: {0}")]
    Remap(#[from] RemapError),
    #[error("generated stream disagrees with closed-form count for {what}: stream {stream}, expected {expected}")]
    CountMismatch { what: &'static str, stream: u64, expected: u64 },
}

/// Anything that aborts a simulation run.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimFault {
    #[error("PE {pe} op {op}: {source}")]
    Address {
        pe: usize,
        op: u64,
        #[source]
        source: RemapError,
    },
    #[error("PE {pe} op {op}: address {addr:#x} is not inside a live allocation")]
    Unallocated { pe: usize, op: u64, addr: u64 },
    #[error("PE {pe}: heap event {event}: {reason}")]
    Heap { pe: usize, event: u32, reason: String },
    #[error("PE {pe}: DMA: {reason}")]
    Dma { pe: usize, reason: String },
    #[error("PE {pe}: barrier {id}: {reason}")]
    Barrier { pe: usize, id: u32, reason: String },
    #[error("deadlock at cycle {cycle}: every unfinished PE is blocked and nothing is in flight")]
    Deadlock { cycle: u64 },
    #[error("exceeded cycle limit {limit}")]
    CycleLimit { limit: u64 },
    #[error("invalid program: {0}")]
    Program(String),
}
