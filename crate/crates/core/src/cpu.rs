//! A micro-ISA interpreter with x86-shaped exception frames, vmfunc and #VE
//! dispatch into the sentry.

use std::collections::VecDeque;
use std::fmt;

use crate::addr::{AccessKind, Address};
use crate::error::{Result, SimError};
use crate::gate::{self, vector_has_error_code};
use crate::machine::{layout, Machine};
use crate::mem::{Fault, TranslationOutcome, VmExitReason};
use crate::sentry::{self, ControlTransfer};
use crate::trace::{SwitchKind, TraceEvent};

pub const CS_SELECTOR: u64 = 0x10;
pub const SS_SELECTOR: u64 = 0x18;
const RFLAGS_FIXED: u64 = 0x2;
const RFLAGS_IF: u64 = 0x200;
/// Bytes in one instruction slot.
pub const INSN_SIZE: u64 = 8;

pub fn encode_rflags(interrupts_enabled: bool) -> u64 {
    RFLAGS_FIXED | if interrupts_enabled { RFLAGS_IF } else { 0 }
}

pub fn rflags_if(rflags: u64) -> bool {
    rflags & RFLAGS_IF != 0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Reg {
    Rax,
    Rdi,
    Rsi,
    Rdx,
    Rcx,
    R8,
    R9,
    Rbx,
    Rbp,
    R12,
    R13,
    R14,
    R15,
}

impl Reg {
    pub const ARGS: [Reg; 6] = [Reg::Rdi, Reg::Rsi, Reg::Rdx, Reg::Rcx, Reg::R8, Reg::R9];
    pub const CALLEE_SAVED: [Reg; 6] = [Reg::Rbx, Reg::Rbp, Reg::R12, Reg::R13, Reg::R14, Reg::R15];

    pub fn name(self) -> &'static str {
        match self {
            Reg::Rax => "rax",
            Reg::Rdi => "rdi",
            Reg::Rsi => "rsi",
            Reg::Rdx => "rdx",
            Reg::Rcx => "rcx",
            Reg::R8 => "r8",
            Reg::R9 => "r9",
            Reg::Rbx => "rbx",
            Reg::Rbp => "rbp",
            Reg::R12 => "r12",
            Reg::R13 => "r13",
            Reg::R14 => "r14",
            Reg::R15 => "r15",
        }
    }

    pub fn from_name(name: &str) -> Option<Reg> {
        let all = [Reg::Rax]
            .into_iter()
            .chain(Reg::ARGS)
            .chain(Reg::CALLEE_SAVED);
        all.into_iter().find(|r| r.name() == name)
    }
}

impl fmt::Display for Reg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Instruction {
    Call(Address),
    Ret,
    /// Load the word at the address into rax.
    Read(Address),
    Write(Address, u64),
    Vmfunc(u64),
    Vmcall,
    Iretq,
    Nop,
    SetEuid(u64),
    /// Marker for interrupt handler bodies; otherwise a no-op.
    HandlerBody(u64),
    Halt,
    LoadImm {
        reg: Reg,
        value: u64,
    },
    /// `add rsp, 8`.
    DropWord,
    /// Edit the guest page table: map `gva`'s page to `gpa`'s page. Needs
    /// write access to the page-table region.
    PtMap {
        gva: Address,
        gpa: Address,
    },
    /// Entry token of the #VE handler.
    VeSentry,
    /// Entry token of the interrupt sentry for one vector.
    IntSentry(u8),
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Instruction::Call(a) => write!(f, "call {a}"),
            Instruction::Ret => f.write_str("ret"),
            Instruction::Read(a) => write!(f, "read {a}"),
            Instruction::Write(a, v) => write!(f, "write {a} {v:#x}"),
            Instruction::Vmfunc(i) => write!(f, "vmfunc {i}"),
            Instruction::Vmcall => f.write_str("vmcall"),
            Instruction::Iretq => f.write_str("iretq"),
            Instruction::Nop => f.write_str("nop"),
            Instruction::SetEuid(id) => write!(f, "seteuid {id}"),
            Instruction::HandlerBody(tag) => write!(f, "body {tag}"),
            Instruction::Halt => f.write_str("halt"),
            Instruction::LoadImm { reg, value } => write!(f, "mov {reg} {value:#x}"),
            Instruction::DropWord => f.write_str("drop"),
            Instruction::PtMap { gva, gpa } => write!(f, "ptmap {gva} {gpa}"),
            Instruction::VeSentry => f.write_str("ve-sentry"),
            Instruction::IntSentry(v) => write!(f, "int-sentry {v}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CpuState {
    pub rip: Address,
    pub rsp: Address,
    pub rflags_if: bool,
    pub rax: u64,
    pub args: [u64; 6],
    pub callee_saved: [u64; 6],
    pub current_ept: usize,
    pub euid: u64,
    pub halted: bool,
}

impl CpuState {
    pub fn get(&self, reg: Reg) -> u64 {
        match reg {
            Reg::Rax => self.rax,
            r => {
                if let Some(i) = Reg::ARGS.iter().position(|a| *a == r) {
                    self.args[i]
                } else {
                    self.callee_saved[Reg::CALLEE_SAVED.iter().position(|a| *a == r).unwrap()]
                }
            }
        }
    }

    pub fn set(&mut self, reg: Reg, value: u64) {
        match reg {
            Reg::Rax => self.rax = value,
            r => {
                if let Some(i) = Reg::ARGS.iter().position(|a| *a == r) {
                    self.args[i] = value;
                } else {
                    self.callee_saved[Reg::CALLEE_SAVED.iter().position(|a| *a == r).unwrap()] =
                        value;
                }
            }
        }
    }

    pub fn rflags(&self) -> u64 {
        encode_rflags(self.rflags_if)
    }
}

/// Five-slot exception frame. In memory, from the lowest address:
/// RIP, CS, RFLAGS, RSP, SS (pushed in the reverse order).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HardwareFrame {
    pub rip: Address,
    pub cs: u64,
    pub rflags: u64,
    pub rsp: Address,
    pub ss: u64,
}

impl HardwareFrame {
    pub const SIZE: u64 = 40;

    pub fn new(rip: Address, rflags: u64, rsp: Address) -> Self {
        HardwareFrame {
            rip,
            cs: CS_SELECTOR,
            rflags,
            rsp,
            ss: SS_SELECTOR,
        }
    }

    pub fn words(&self) -> [u64; 5] {
        [self.rip.0, self.cs, self.rflags, self.rsp.0, self.ss]
    }

    pub fn from_words(w: [u64; 5]) -> Self {
        HardwareFrame {
            rip: Address(w[0]),
            cs: w[1],
            rflags: w[2],
            rsp: Address(w[3]),
            ss: w[4],
        }
    }
}

/// Why a thread stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exit {
    Halt,
    Violation,
    GuestPageFault,
    InvalidInstruction,
    FuelExhausted,
}

impl Exit {
    pub fn name(self) -> &'static str {
        match self {
            Exit::Halt => "halt",
            Exit::Violation => "violation",
            Exit::GuestPageFault => "guest-page-fault",
            Exit::InvalidInstruction => "invalid-instruction",
            Exit::FuelExhausted => "fuel-exhausted",
        }
    }
}

/// A scenario-driven interrupt: delivered once `after_step` steps have run
/// and interrupts are enabled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Injection {
    pub after_step: u64,
    pub vector: u8,
    pub error_code: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunResult {
    pub outcome: Exit,
    pub steps: u64,
}

/// Push words with processor privilege: no #VE, a fault aborts delivery.
fn hw_push(
    m: &mut Machine,
    cpu: &CpuState,
    top: Address,
    words: &[u64],
) -> std::result::Result<Address, Fault> {
    let mut sp = top;
    for w in words.iter().rev() {
        sp = sp.sub(8);
        m.write_word_as(cpu.current_ept, sp, *w)?;
    }
    Ok(sp)
}

fn delivery_failed(m: &mut Machine, cpu: &mut CpuState, fault: Fault) -> Exit {
    let (gva, access) = match fault {
        Fault::EptViolation { gva, access, .. } => (gva, access),
        Fault::GuestPageFault(gva) => (gva, AccessKind::Write),
    };
    m.emit(TraceEvent::VmExit(VmExitReason::DeliveryFault {
        gva,
        access,
    }));
    let rec = gate::violation(
        cpu.current_ept,
        gva,
        None,
        Some(access),
        "fault while pushing exception frame",
    );
    gate::handle_vmcall_violation(m, cpu, rec);
    Exit::Violation
}

/// Push a #VE frame naming `faulting_rip` and enter the sentry.
fn deliver_ve(m: &mut Machine, cpu: &mut CpuState, faulting_rip: Address) -> Option<Exit> {
    let frame = HardwareFrame::new(faulting_rip, cpu.rflags(), cpu.rsp);
    match hw_push(m, cpu, cpu.rsp, &frame.words()) {
        Ok(sp) => {
            cpu.rsp = sp;
            cpu.rflags_if = false;
            cpu.rip = layout::VE_ENTRY;
            None
        }
        Err(f) => Some(delivery_failed(m, cpu, f)),
    }
}

/// Result of a guest data access or fetch that may have been redirected.
enum Access {
    Ok(Address),
    Stopped(Option<Exit>),
}

fn guest_access(m: &mut Machine, cpu: &mut CpuState, gva: Address, kind: AccessKind) -> Access {
    let insn_rip = cpu.rip;
    match m.translate(cpu, gva, kind) {
        TranslationOutcome::Ok(hpa) => Access::Ok(hpa),
        TranslationOutcome::VeDelivered(info) => {
            m.emit(TraceEvent::Ve(info));
            Access::Stopped(deliver_ve(m, cpu, insn_rip))
        }
        TranslationOutcome::VmExit(reason) => {
            m.emit(TraceEvent::VmExit(reason));
            let (gpa, access) = match reason {
                VmExitReason::EptViolation { gpa, access, .. } => (Some(gpa), Some(access)),
                _ => (None, Some(kind)),
            };
            let rec = gate::violation(cpu.current_ept, gva, gpa, access, "ept violation exit");
            gate::handle_vmcall_violation(m, cpu, rec);
            Access::Stopped(Some(Exit::Violation))
        }
        TranslationOutcome::GuestPageFault(gva) => {
            m.emit(TraceEvent::GuestPageFault { gva });
            cpu.halted = true;
            Access::Stopped(Some(Exit::GuestPageFault))
        }
    }
}

macro_rules! access {
    ($m:expr, $cpu:expr, $gva:expr, $kind:expr) => {
        match guest_access($m, $cpu, $gva, $kind) {
            Access::Ok(hpa) => hpa,
            Access::Stopped(exit) => return exit,
        }
    };
}

/// Execute one instruction. Returns `Some` when the thread stopped.
pub fn step(m: &mut Machine, cpu: &mut CpuState) -> Option<Exit> {
    if cpu.halted {
        return Some(Exit::Halt);
    }
    m.steps += 1;
    let rip = cpu.rip;
    let ept = cpu.current_ept;
    let hpa = access!(m, cpu, rip, AccessKind::Execute);
    let Some(insn) = m.mem.fetch(hpa) else {
        m.emit(TraceEvent::InvalidInstruction { rip });
        cpu.halted = true;
        return Some(Exit::InvalidInstruction);
    };
    let next = rip.add(INSN_SIZE);

    match insn {
        Instruction::VeSentry => {
            return match sentry::ve_handler(m, cpu) {
                ControlTransfer::ViolationTrap => Some(Exit::Violation),
                _ => None,
            };
        }
        Instruction::IntSentry(v) => {
            return match sentry::interrupt_sentry(m, cpu, v) {
                ControlTransfer::ViolationTrap => Some(Exit::Violation),
                _ => None,
            };
        }
        Instruction::Call(target) => {
            let slot = cpu.rsp.sub(8);
            let h = access!(m, cpu, slot, AccessKind::Write);
            m.mem.write_word(h, next.0);
            cpu.rsp = slot;
            cpu.rip = target;
        }
        Instruction::Ret => {
            let h = access!(m, cpu, cpu.rsp, AccessKind::Read);
            cpu.rip = Address(m.mem.read_word(h));
            cpu.rsp = cpu.rsp.add(8);
        }
        Instruction::Read(a) => {
            let h = access!(m, cpu, a, AccessKind::Read);
            cpu.rax = m.mem.read_word(h);
            cpu.rip = next;
        }
        Instruction::Write(a, v) => {
            let h = access!(m, cpu, a, AccessKind::Write);
            m.mem.write_word(h, v);
            cpu.rip = next;
        }
        Instruction::Vmfunc(i) => {
            if i >= m.eptp.len() as u64 {
                let reason = VmExitReason::InvalidEptpIndex(i);
                m.emit(TraceEvent::VmExit(reason));
                let rec = gate::violation(
                    ept,
                    rip,
                    None,
                    None,
                    format!("vmfunc to invalid EPTP index {i}"),
                );
                gate::handle_vmcall_violation(m, cpu, rec);
                return Some(Exit::Violation);
            }
            cpu.rip = next;
            m.emit(TraceEvent::Retired { ept, rip, insn });
            let to = i as usize;
            if to != ept {
                m.emit(TraceEvent::Switch {
                    from: ept,
                    to,
                    kind: SwitchKind::Vmfunc,
                    target: next,
                });
            }
            cpu.current_ept = to;
            return None;
        }
        Instruction::Vmcall => {
            m.emit(TraceEvent::Retired { ept, rip, insn });
            let rec = gate::violation(ept, rip, None, None, "vmcall");
            gate::handle_vmcall_violation(m, cpu, rec);
            return Some(Exit::Violation);
        }
        Instruction::Iretq => {
            let mut w = [0u64; 5];
            for (i, slot) in w.iter_mut().enumerate() {
                let h = access!(m, cpu, cpu.rsp.add(8 * i as u64), AccessKind::Read);
                *slot = m.mem.read_word(h);
            }
            let frame = HardwareFrame::from_words(w);
            cpu.rip = frame.rip;
            cpu.rsp = frame.rsp;
            cpu.rflags_if = rflags_if(frame.rflags);
        }
        Instruction::Nop | Instruction::HandlerBody(_) => cpu.rip = next,
        Instruction::SetEuid(id) => {
            cpu.euid = id;
            cpu.rip = next;
        }
        Instruction::Halt => {
            m.emit(TraceEvent::Retired { ept, rip, insn });
            cpu.halted = true;
            return Some(Exit::Halt);
        }
        Instruction::LoadImm { reg, value } => {
            cpu.set(reg, value);
            cpu.rip = next;
        }
        Instruction::DropWord => {
            cpu.rsp = cpu.rsp.add(8);
            cpu.rip = next;
        }
        Instruction::PtMap { gva, gpa } => {
            let entry = layout::PAGE_TABLE_REGION.add(8 * ((gva.0 >> 12) & 511));
            let h = access!(m, cpu, entry, AccessKind::Write);
            m.mem.write_word(h, gpa.page().0);
            m.guest_pt
                .map(gva.page(), gpa.page())
                .expect("page-aligned by construction");
            cpu.rip = next;
        }
    }
    m.emit(TraceEvent::Retired { ept, rip, insn });
    None
}

/// Deliver an external interrupt. Returns false (deferred) when interrupts
/// are disabled.
pub fn deliver_interrupt(
    m: &mut Machine,
    cpu: &mut CpuState,
    vector: u8,
    error_code: Option<u64>,
) -> Option<Exit> {
    let frame = HardwareFrame::new(cpu.rip, cpu.rflags(), cpu.rsp);
    let mut words = Vec::with_capacity(6);
    if let Some(code) = error_code {
        words.push(code);
    }
    words.extend(frame.words());
    let sp = match hw_push(m, cpu, cpu.rsp, &words) {
        Ok(sp) => sp,
        Err(f) => return Some(delivery_failed(m, cpu, f)),
    };
    cpu.rsp = sp;
    cpu.rflags_if = false;
    m.emit(TraceEvent::InterruptDelivered {
        vector,
        ept: cpu.current_ept,
    });
    match m.probe(cpu.current_ept, layout::idt_slot(vector), AccessKind::Read) {
        Ok(h) => {
            cpu.rip = Address(m.mem.read_word(h));
            None
        }
        Err(f) => Some(delivery_failed(m, cpu, f)),
    }
}

pub fn validate_injection(inj: &Injection) -> Result<()> {
    if vector_has_error_code(inj.vector) != inj.error_code.is_some() {
        let want = if vector_has_error_code(inj.vector) {
            "requires"
        } else {
            "does not take"
        };
        return Err(SimError::InvalidInjection(format!(
            "vector {} {want} an error code",
            inj.vector
        )));
    }
    Ok(())
}

/// Step until the thread stops or `fuel` steps have run. Interrupts become
/// pending once their step count is reached and are delivered in order
/// whenever interrupts are enabled.
pub fn run(
    m: &mut Machine,
    cpu: &mut CpuState,
    fuel: u64,
    injections: &[Injection],
) -> Result<RunResult> {
    for inj in injections {
        validate_injection(inj)?;
    }
    let mut future: Vec<Injection> = injections.to_vec();
    future.sort_by_key(|i| i.after_step);
    let mut future: VecDeque<Injection> = future.into();
    let mut pending: VecDeque<Injection> = VecDeque::new();

    let mut steps = 0;
    while steps < fuel {
        while future.front().is_some_and(|i| i.after_step <= steps) {
            pending.push_back(future.pop_front().unwrap());
        }
        if cpu.rflags_if {
            if let Some(inj) = pending.pop_front() {
                if let Some(exit) = deliver_interrupt(m, cpu, inj.vector, inj.error_code) {
                    return Ok(RunResult {
                        outcome: exit,
                        steps,
                    });
                }
            }
        }
        steps += 1;
        if let Some(exit) = step(m, cpu) {
            return Ok(RunResult {
                outcome: exit,
                steps,
            });
        }
    }
    Ok(RunResult {
        outcome: Exit::FuelExhausted,
        steps,
    })
}
