//! Simulator for EPT-based kernel compartments: policy compilation,
//! two-stage translation, a sentry mediating every cross-compartment
//! transition, and a crossing/cycle cost model for a NIC data path.

pub mod addr;
pub mod attack;
pub mod cost;
pub mod cpu;
pub mod error;
pub mod gate;
pub mod igc;
pub mod machine;
pub mod mem;
pub mod policy;
pub mod scenario;
pub mod sentry;
pub mod sim;
pub mod trace;

#[cfg(test)]
mod fixtures;

pub use addr::{AccessKind, Address, Permission, PAGE_SIZE};
pub use cost::{estimate_cycles, CostTable, CrossingTable, DataPath, DataPathConfig, Rate};
pub use cpu::{CpuState, Exit, Injection, Instruction, Reg, RunResult};
pub use error::{InputKind, Result, SimError};
pub use machine::{layout, Machine, MachineConfig};
pub use mem::{
    Ept, EptEntry, GuestPageTable, HlatEntry, HlatTable, TranslationOutcome, VeInfoArea,
};
pub use policy::{
    AccessMatrix, CompartmentPolicy, Diagnostic, ExecutionContext, Severity, Symbol, SymbolTable,
};
pub use sentry::{ControlTransfer, MAGIC_CALL, MAGIC_INT_ERR, MAGIC_INT_NOERR};
pub use sim::Simulation;
pub use trace::{SwitchKind, TraceEvent, TraceRecord, ViolationRecord};
