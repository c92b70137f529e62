//! Cycle-approximate simulator of a shared-L1 manycore cluster with a
//! runtime-programmable address remapper and a unified heap allocator.

pub mod alloc;
pub mod engine;
pub mod error;
pub mod kernels;
pub mod remap;
pub mod scenario;
pub mod topology;

pub use alloc::Heap;
pub use kernels::{KernelPlan, Scheme};
pub use error::{AllocError, KernelError, RemapError, SimFault, TopologyError};
pub use remap::{MapConfig, MapKind, MapRequest, PhysicalLocation};
pub use topology::{ClusterTopology, HierarchyLevel, LevelLatency};
