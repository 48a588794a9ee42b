//! Command-level DRAM simulator with in-DRAM bulk data movement.
//!
//! The simulator models a DDR3-style memory system at command granularity
//! and implements three families of in-DRAM bulk operations on top of it:
//!
//! * row copies via back-to-back activations within a subarray (FPM) and
//!   pipelined inter-bank cacheline transfers (PSM),
//! * bulk zeroing/initialization from reserved rows,
//! * bulk bitwise AND/OR via triple-row activation with control rows.
//!
//! A memory-controller layer decomposes arbitrary bulk operations into
//! accelerated and CPU portions, keeps a last-level cache coherent around
//! them, and a harness runs traces, synthetic workloads, and reports.

pub mod addr;
pub mod config;
pub mod dram;
pub mod energy;
pub mod engine;
pub mod error;
pub mod harness;
pub mod idao;
pub mod llc;
pub mod memctrl;
pub mod reference;
pub mod rowclone;
pub mod sched;
pub mod trace;
pub mod workloads;

pub use config::{DeviceConfig, FpmLatencyMode, IdaoConservativeSource, Interleave, TimingParams};
pub use energy::{EnergyMode, MechKind, OpClass};
pub use engine::{Engine, Mechanism, PAGE_SIZE};
pub use error::{Error, Result};
pub use harness::{report, run_trace, ReportFormat, RunStats};
pub use memctrl::{split_region, ExecutionPlan, IsaOp, PagePools};
pub use trace::{format_trace, parse_trace, TraceOp};
