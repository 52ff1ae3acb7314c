//! Ordered run events and their one-line text form:
//! `step# | event-kind | fields`.

use std::fmt;

use crate::addr::{AccessKind, Address};
use crate::cpu::Instruction;
use crate::mem::{VeInfoSnapshot, VmExitReason};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SwitchKind {
    Call,
    Ret,
    Int,
    Iret,
    /// A bare vmfunc outside the sentry.
    Vmfunc,
}

impl SwitchKind {
    pub fn name(self) -> &'static str {
        match self {
            SwitchKind::Call => "call",
            SwitchKind::Ret => "ret",
            SwitchKind::Int => "int",
            SwitchKind::Iret => "iret",
            SwitchKind::Vmfunc => "vmfunc",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ViolationRecord {
    pub source_cmpt: usize,
    pub gva: Address,
    pub gpa: Option<Address>,
    pub access: Option<AccessKind>,
    pub reason: String,
}

impl fmt::Display for ViolationRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "cmpt={} gva={}", self.source_cmpt, self.gva)?;
        if let Some(gpa) = self.gpa {
            write!(f, " gpa={gpa}")?;
        }
        if let Some(a) = self.access {
            write!(f, " access={a}")?;
        }
        write!(f, " reason={}", self.reason)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TraceEvent {
    Retired {
        ept: usize,
        rip: Address,
        insn: Instruction,
    },
    /// `target` is the callee entry for calls, the resume address otherwise.
    Switch {
        from: usize,
        to: usize,
        kind: SwitchKind,
        target: Address,
    },
    Ve(VeInfoSnapshot),
    VmExit(VmExitReason),
    Violation(ViolationRecord),
    InterruptDelivered {
        vector: u8,
        ept: usize,
    },
    /// Successful translation; only recorded when access tracing is on.
    Access {
        ept: usize,
        gva: Address,
        gpa: Address,
        kind: AccessKind,
    },
    GuestPageFault {
        gva: Address,
    },
    InvalidInstruction {
        rip: Address,
    },
}

impl TraceEvent {
    pub fn kind_name(&self) -> &'static str {
        match self {
            TraceEvent::Retired { .. } => "retired",
            TraceEvent::Switch { .. } => "switch",
            TraceEvent::Ve(_) => "ve",
            TraceEvent::VmExit(_) => "vmexit",
            TraceEvent::Violation(_) => "violation",
            TraceEvent::InterruptDelivered { .. } => "interrupt",
            TraceEvent::Access { .. } => "access",
            TraceEvent::GuestPageFault { .. } => "guest-page-fault",
            TraceEvent::InvalidInstruction { .. } => "invalid-instruction",
        }
    }
}

impl fmt::Display for TraceEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} | ", self.kind_name())?;
        match self {
            TraceEvent::Retired { ept, rip, insn } => write!(f, "ept={ept} rip={rip} {insn}"),
            TraceEvent::Switch {
                from,
                to,
                kind,
                target,
            } => {
                write!(f, "{from}->{to} kind={} target={target}", kind.name())
            }
            TraceEvent::Ve(info) => write!(f, "{info}"),
            TraceEvent::VmExit(reason) => write!(f, "{reason}"),
            TraceEvent::Violation(v) => write!(f, "{v}"),
            TraceEvent::InterruptDelivered { vector, ept } => {
                write!(f, "vector={vector} ept={ept}")
            }
            TraceEvent::Access {
                ept,
                gva,
                gpa,
                kind,
            } => {
                write!(f, "ept={ept} {kind} gva={gva} gpa={gpa}")
            }
            TraceEvent::GuestPageFault { gva } => write!(f, "gva={gva}"),
            TraceEvent::InvalidInstruction { rip } => write!(f, "rip={rip}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceRecord {
    pub step: u64,
    pub event: TraceEvent,
}

impl fmt::Display for TraceRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} | {}", self.step, self.event)
    }
}

/// Count switch events, optionally restricted to one kind.
pub fn count_switches(trace: &[TraceRecord], kind: Option<SwitchKind>) -> usize {
    trace
        .iter()
        .filter(|r| match &r.event {
            TraceEvent::Switch { kind: k, .. } => kind.is_none_or(|want| want == *k),
            _ => false,
        })
        .count()
}

pub fn count_ve(trace: &[TraceRecord]) -> usize {
    trace
        .iter()
        .filter(|r| matches!(r.event, TraceEvent::Ve(_)))
        .count()
}

pub fn render(trace: &[TraceRecord]) -> String {
    let mut out = String::new();
    for r in trace {
        out.push_str(&r.to_string());
        out.push('\n');
    }
    out
}
