//! The simulated system: memory, translation structures, sentry regions and
//! the event trace.

use std::collections::BTreeMap;

use crate::addr::{AccessKind, Address, PAGE_SIZE};
use crate::cpu::{CpuState, Instruction};
use crate::mem::{
    resolve_gpa, walk, Ept, EptpList, Fault, GuestPageTable, HlatTable, PhysicalMemory,
    TranslationOutcome, VeInfoArea, VeInfoSnapshot, VmExitReason, EXIT_REASON_EPT_VIOLATION,
};
use crate::policy::AccessMatrix;
use crate::trace::{TraceEvent, TraceRecord, ViolationRecord};

/// Fixed guest addresses of gate-managed regions. Guest-virtual and
/// guest-physical addresses coincide for every page the gate installs.
pub mod layout {
    use crate::addr::{Address, PAGE_SIZE};

    pub const RESERVED_START: u64 = 0x7000_0000;
    pub const RESERVED_END: u64 = 0x8000_0000;

    pub const SENTRY_CODE: Address = Address(0x7000_0000);
    pub const VE_ENTRY: Address = SENTRY_CODE;
    pub const SENTRY_RO: Address = Address(0x7000_1000);
    pub const SENTRY_RW: Address = Address(0x7000_2000);
    pub const INT_STACK: Address = Address(0x7000_3000);
    pub const INT_STACK_TOP: Address = Address(0x7000_4000);
    pub const IDT: Address = Address(0x7000_4000);
    /// Mapped in the guest page table but in no EPT; used as the resume
    /// address of an interrupt-sentry frame when the interrupted RIP is
    /// executable in the default compartment.
    pub const INT_RESUME_STUB: Address = Address(0x7000_5000);
    pub const PAGE_TABLE_REGION: Address = Address(0x7000_6000);
    pub const HANDLERS: Address = Address(0x7001_0000);
    pub const HANDLER_PAGES: u64 = 2;
    pub const HANDLER_STRIDE: u64 = 32;
    pub const STACKS: Address = Address(0x7400_0000);

    pub const fn int_sentry_entry(vector: u8) -> Address {
        Address(SENTRY_CODE.0 + 8 + 8 * vector as u64)
    }

    pub const fn default_handler(vector: u8) -> Address {
        Address(HANDLERS.0 + HANDLER_STRIDE * vector as u64)
    }

    pub const fn idt_slot(vector: u8) -> Address {
        Address(IDT.0 + 8 * vector as u64)
    }

    pub const fn rw_slot(cmpt: usize) -> Address {
        Address(SENTRY_RW.0 + 8 * cmpt as u64)
    }

    /// Lowest address of compartment `cmpt`'s stack; one guard page separates stacks.
    pub const fn stack_base(cmpt: usize, stack_pages: u64) -> Address {
        Address(STACKS.0 + cmpt as u64 * (stack_pages + 1) * PAGE_SIZE)
    }

    pub const fn stack_top(cmpt: usize, stack_pages: u64) -> Address {
        Address(stack_base(cmpt, stack_pages).0 + stack_pages * PAGE_SIZE)
    }

    pub const fn is_reserved(gva: Address) -> bool {
        gva.0 >= RESERVED_START && gva.0 < RESERVED_END
    }
}

/// Host-physical offset of the shared backing for ordinary guest pages.
pub const HOST_BACKING_OFFSET: u64 = 0x10_0000_0000;
/// Pool for per-compartment alternate pages (sentry rows, IDT images).
pub const ALT_POOL_BASE: u64 = 0x20_0000_0000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MachineConfig {
    pub hlat_enabled: bool,
    /// Record a trace event for every successful translation.
    pub trace_accesses: bool,
    pub stack_pages: u64,
}

impl Default for MachineConfig {
    fn default() -> Self {
        MachineConfig {
            hlat_enabled: true,
            trace_accesses: false,
            stack_pages: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Machine {
    pub config: MachineConfig,
    pub mem: PhysicalMemory,
    pub epts: Vec<Ept>,
    pub eptp: EptpList,
    pub hlat: HlatTable,
    pub guest_pt: GuestPageTable,
    pub ve_info: VeInfoArea,
    pub matrix: Option<AccessMatrix>,
    /// Per compartment: whether frames the sentry synthesizes for that
    /// compartment leave interrupts enabled.
    pub irq_enabled: Vec<bool>,
    pub violations: Vec<ViolationRecord>,
    pub trace: Vec<TraceRecord>,
    pub steps: u64,
    pub handler_overrides: BTreeMap<u8, Address>,
    next_alt: u64,
}

impl Machine {
    pub fn new(config: MachineConfig) -> Self {
        Machine {
            config,
            mem: PhysicalMemory::new(),
            epts: Vec::new(),
            eptp: EptpList::default(),
            hlat: HlatTable::new(config.hlat_enabled),
            guest_pt: GuestPageTable::default(),
            ve_info: VeInfoArea::default(),
            matrix: None,
            irq_enabled: Vec::new(),
            violations: Vec::new(),
            trace: Vec::new(),
            steps: 0,
            handler_overrides: BTreeMap::new(),
            next_alt: ALT_POOL_BASE,
        }
    }

    pub fn num_compartments(&self) -> usize {
        self.eptp.len()
    }

    pub fn ept_by_slot(&self, slot: usize) -> Option<&Ept> {
        self.eptp.get(slot).and_then(|i| self.epts.get(i))
    }

    pub fn stack_top(&self, cmpt: usize) -> Address {
        layout::stack_top(cmpt, self.config.stack_pages)
    }

    pub fn emit(&mut self, event: TraceEvent) {
        self.trace.push(TraceRecord {
            step: self.steps,
            event,
        });
    }

    pub fn take_trace(&mut self) -> Vec<TraceRecord> {
        std::mem::take(&mut self.trace)
    }

    pub fn backing_hpa(gpa: Address) -> Address {
        Address(gpa.0 + HOST_BACKING_OFFSET)
    }

    pub(crate) fn alloc_alt_page(&mut self) -> Address {
        let p = Address(self.next_alt);
        self.next_alt += PAGE_SIZE;
        p
    }

    /// Walk the pipeline through the EPT in `slot` with no side effects.
    pub fn probe(&self, slot: usize, gva: Address, access: AccessKind) -> Result<Address, Fault> {
        let ept = match self.ept_by_slot(slot) {
            Some(e) => e,
            None => {
                return Err(Fault::EptViolation {
                    gva,
                    gpa: gva,
                    access,
                    suppress_ve: true,
                });
            }
        };
        walk(&self.hlat, &self.guest_pt, ept, gva, access)
    }

    /// Like `probe`, but records an access event when tracing is on.
    pub fn access(
        &mut self,
        slot: usize,
        gva: Address,
        access: AccessKind,
    ) -> Result<Address, Fault> {
        let hpa = self.probe(slot, gva, access)?;
        if self.config.trace_accesses {
            let gpa = resolve_gpa(&self.hlat, &self.guest_pt, gva).unwrap_or(gva);
            self.emit(TraceEvent::Access {
                ept: slot,
                gva,
                gpa,
                kind: access,
            });
        }
        Ok(hpa)
    }

    pub fn read_word_as(&mut self, slot: usize, gva: Address) -> Result<u64, Fault> {
        let hpa = self.access(slot, gva, AccessKind::Read)?;
        Ok(self.mem.read_word(hpa))
    }

    pub fn write_word_as(&mut self, slot: usize, gva: Address, value: u64) -> Result<(), Fault> {
        let hpa = self.access(slot, gva, AccessKind::Write)?;
        self.mem.write_word(hpa, value);
        Ok(())
    }

    /// Read a guest word through `slot` without tracing; for inspection.
    pub fn peek(&self, slot: usize, gva: Address) -> Option<u64> {
        self.probe(slot, gva, AccessKind::Read)
            .ok()
            .map(|h| self.mem.read_word(h))
    }

    /// Host-side loader write into the shared backing of `gpa`.
    pub fn load_word(&mut self, gpa: Address, value: u64) {
        self.mem.write_word(Self::backing_hpa(gpa), value);
    }

    pub fn load_insn(&mut self, gpa: Address, insn: Instruction) {
        self.mem.write_insn(Self::backing_hpa(gpa), insn);
    }

    /// Translate through the CPU's current EPT. An EPT violation becomes a
    /// #VE when the page does not suppress it and the mask is clear; the
    /// information area is written and the mask set. Otherwise it is a VM exit.
    pub fn translate(
        &mut self,
        cpu: &CpuState,
        gva: Address,
        access: AccessKind,
    ) -> TranslationOutcome {
        match self.access(cpu.current_ept, gva, access) {
            Ok(hpa) => TranslationOutcome::Ok(hpa),
            Err(Fault::GuestPageFault(gva)) => TranslationOutcome::GuestPageFault(gva),
            Err(Fault::EptViolation {
                gva,
                gpa,
                access,
                suppress_ve,
            }) => {
                let masked = self.ve_info.mask;
                if suppress_ve || masked {
                    return TranslationOutcome::VmExit(VmExitReason::EptViolation {
                        gva,
                        gpa,
                        access,
                        suppressed: suppress_ve,
                        masked,
                    });
                }
                self.ve_info = VeInfoArea {
                    exit_reason: EXIT_REASON_EPT_VIOLATION,
                    exit_qualification: Some(access),
                    faulting_gva: gva,
                    faulting_gpa: gpa,
                    eptp_index: cpu.current_ept,
                    mask: true,
                };
                TranslationOutcome::VeDelivered(VeInfoSnapshot {
                    exit_qualification: access,
                    faulting_gva: gva,
                    faulting_gpa: gpa,
                    eptp_index: cpu.current_ept,
                })
            }
        }
    }
}
