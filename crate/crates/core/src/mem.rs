//! Simulated physical memory and the two-stage translation pipeline:
//! HLAT (optional) → guest page table → per-compartment EPT.

use std::collections::BTreeMap;
use std::fmt;

use crate::addr::{AccessKind, Address, Permission, PAGE_MASK, WORD_SIZE};
use crate::cpu::{CpuState, Instruction};
use crate::error::{Result, SimError};
use crate::machine::Machine;

/// Capacity of the EPTP list addressable by vmfunc.
pub const EPTP_CAPACITY: usize = 512;

/// Exit reason recorded in the #VE information area for an EPT violation.
pub const EXIT_REASON_EPT_VIOLATION: u32 = 48;

/// One 8-byte memory cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cell {
    Word(u64),
    Insn(Instruction),
}

/// Host-physical memory, word addressed. Cells that were never written read
/// as zero.
#[derive(Debug, Clone, Default)]
pub struct PhysicalMemory {
    cells: BTreeMap<u64, Cell>,
}

impl PhysicalMemory {
    pub fn new() -> Self {
        Self::default()
    }

    fn key(hpa: Address) -> u64 {
        hpa.0 & !(WORD_SIZE - 1)
    }

    pub fn read_word(&self, hpa: Address) -> u64 {
        match self.cells.get(&Self::key(hpa)) {
            Some(Cell::Word(v)) => *v,
            Some(Cell::Insn(_)) | None => 0,
        }
    }

    pub fn write_word(&mut self, hpa: Address, value: u64) {
        self.cells.insert(Self::key(hpa), Cell::Word(value));
    }

    pub fn fetch(&self, hpa: Address) -> Option<Instruction> {
        match self.cells.get(&Self::key(hpa)) {
            Some(Cell::Insn(i)) => Some(*i),
            _ => None,
        }
    }

    pub fn write_insn(&mut self, hpa: Address, insn: Instruction) {
        self.cells.insert(Self::key(hpa), Cell::Insn(insn));
    }

    pub fn cell(&self, hpa: Address) -> Option<Cell> {
        self.cells.get(&Self::key(hpa)).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EptEntry {
    pub hpa_page: Address,
    pub perms: Permission,
    /// Models bit 63: violations on this page always exit to the hypervisor.
    pub suppress_ve: bool,
}

/// One extended page table: guest-physical page → entry.
#[derive(Debug, Clone, Default)]
pub struct Ept {
    pub index: usize,
    entries: BTreeMap<u64, EptEntry>,
}

impl Ept {
    pub fn new(index: usize) -> Self {
        Ept {
            index,
            entries: BTreeMap::new(),
        }
    }

    pub fn map(
        &mut self,
        gpa_page: Address,
        hpa_page: Address,
        perms: Permission,
        suppress_ve: bool,
    ) -> Result<()> {
        gpa_page.require_page_aligned()?;
        hpa_page.require_page_aligned()?;
        self.entries.insert(
            gpa_page.0,
            EptEntry {
                hpa_page,
                perms,
                suppress_ve,
            },
        );
        Ok(())
    }

    pub fn unmap(&mut self, gpa_page: Address) -> Option<EptEntry> {
        self.entries.remove(&gpa_page.page().0)
    }

    pub fn entry(&self, gpa: Address) -> Option<&EptEntry> {
        self.entries.get(&gpa.page().0)
    }

    pub fn entries(&self) -> impl Iterator<Item = (Address, &EptEntry)> {
        self.entries.iter().map(|(k, v)| (Address(*k), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// `ept_map` as a free function over an EPT.
pub fn ept_map(
    ept: &mut Ept,
    gpa_page: Address,
    hpa_page: Address,
    perms: Permission,
    suppress_ve: bool,
) -> Result<()> {
    ept.map(gpa_page, hpa_page, perms, suppress_ve)
}

/// Ordered EPT indices selectable by vmfunc. Slot 0 is the default compartment.
#[derive(Debug, Clone, Default)]
pub struct EptpList {
    slots: Vec<usize>,
}

impl EptpList {
    pub fn push(&mut self, ept_index: usize) -> Result<usize> {
        if self.slots.len() >= EPTP_CAPACITY {
            return Err(SimError::EptpCapacity(self.slots.len() + 1));
        }
        self.slots.push(ept_index);
        Ok(self.slots.len() - 1)
    }

    pub fn get(&self, slot: usize) -> Option<usize> {
        self.slots.get(slot).copied()
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HlatEntry {
    /// Pinned guest-physical page; the guest page table is not consulted.
    Fixed(Address),
    /// Restart the walk from the guest page table.
    Restart,
}

#[derive(Debug, Clone, Default)]
pub struct HlatTable {
    pub enabled: bool,
    entries: BTreeMap<u64, HlatEntry>,
}

impl HlatTable {
    pub fn new(enabled: bool) -> Self {
        HlatTable {
            enabled,
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, gva_page: Address, entry: HlatEntry) -> Result<()> {
        gva_page.require_page_aligned()?;
        if let HlatEntry::Fixed(gpa) = entry {
            gpa.require_page_aligned()?;
        }
        self.entries.insert(gva_page.0, entry);
        Ok(())
    }

    pub fn get(&self, gva: Address) -> Option<HlatEntry> {
        self.entries.get(&gva.page().0).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

pub fn hlat_insert(hlat: &mut HlatTable, gva_page: Address, entry: HlatEntry) -> Result<()> {
    hlat.insert(gva_page, entry)
}

/// Guest-controlled GVA → GPA table. Freely writable by guest code that can
/// write the page-table region.
#[derive(Debug, Clone, Default)]
pub struct GuestPageTable {
    entries: BTreeMap<u64, u64>,
}

impl GuestPageTable {
    pub fn map(&mut self, gva_page: Address, gpa_page: Address) -> Result<()> {
        gva_page.require_page_aligned()?;
        gpa_page.require_page_aligned()?;
        self.entries.insert(gva_page.0, gpa_page.0);
        Ok(())
    }

    pub fn lookup(&self, gva: Address) -> Option<Address> {
        self.entries.get(&gva.page().0).map(|p| Address(*p))
    }

    pub fn unmap(&mut self, gva_page: Address) {
        self.entries.remove(&gva_page.page().0);
    }
}

pub fn guest_pt_map(pt: &mut GuestPageTable, gva_page: Address, gpa_page: Address) -> Result<()> {
    pt.map(gva_page, gpa_page)
}

/// The virtualization-exception information area.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct VeInfoArea {
    pub exit_reason: u32,
    pub exit_qualification: Option<AccessKind>,
    pub faulting_gva: Address,
    pub faulting_gpa: Address,
    pub eptp_index: usize,
    pub mask: bool,
}

/// A copy of the information area taken at delivery time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VeInfoSnapshot {
    pub exit_qualification: AccessKind,
    pub faulting_gva: Address,
    pub faulting_gpa: Address,
    pub eptp_index: usize,
}

impl fmt::Display for VeInfoSnapshot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "qual={} gva={} gpa={} eptp={}",
            self.exit_qualification, self.faulting_gva, self.faulting_gpa, self.eptp_index
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VmExitReason {
    /// EPT violation that could not be delivered as #VE.
    EptViolation {
        gva: Address,
        gpa: Address,
        access: AccessKind,
        suppressed: bool,
        masked: bool,
    },
    /// vmfunc with an index outside the EPTP list.
    InvalidEptpIndex(u64),
    /// A fault while the processor pushed an exception frame.
    DeliveryFault { gva: Address, access: AccessKind },
}

impl fmt::Display for VmExitReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VmExitReason::EptViolation { gva, gpa, access, suppressed, masked } => write!(
                f,
                "ept-violation access={access} gva={gva} gpa={gpa} suppressed={suppressed} masked={masked}"
            ),
            VmExitReason::InvalidEptpIndex(i) => write!(f, "invalid-eptp-index {i}"),
            VmExitReason::DeliveryFault { gva, access } => {
                write!(f, "fault-during-delivery access={access} gva={gva}")
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TranslationOutcome {
    Ok(Address),
    VeDelivered(VeInfoSnapshot),
    VmExit(VmExitReason),
    /// The guest page table has no entry for the GVA.
    GuestPageFault(Address),
}

/// Why a side-effect-free walk failed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    GuestPageFault(Address),
    EptViolation {
        gva: Address,
        gpa: Address,
        access: AccessKind,
        suppress_ve: bool,
    },
}

impl fmt::Display for Fault {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Fault::GuestPageFault(gva) => write!(f, "guest page fault at {gva}"),
            Fault::EptViolation {
                gva, gpa, access, ..
            } => {
                write!(f, "EPT violation ({access}) gva={gva} gpa={gpa}")
            }
        }
    }
}

/// Stage 1: GVA → GPA. HLAT first when enabled, guest page table otherwise
/// or on Restart / absent entries.
pub fn resolve_gpa(hlat: &HlatTable, pt: &GuestPageTable, gva: Address) -> Option<Address> {
    if hlat.enabled {
        if let Some(HlatEntry::Fixed(gpa_page)) = hlat.get(gva) {
            return Some(gpa_page.add(gva.offset()));
        }
    }
    pt.lookup(gva).map(|p| p.add(gva.0 & PAGE_MASK))
}

/// Full walk without side effects.
pub fn walk(
    hlat: &HlatTable,
    pt: &GuestPageTable,
    ept: &Ept,
    gva: Address,
    access: AccessKind,
) -> std::result::Result<Address, Fault> {
    let gpa = resolve_gpa(hlat, pt, gva).ok_or(Fault::GuestPageFault(gva))?;
    match ept.entry(gpa) {
        Some(e) if e.perms.allows(access) => Ok(e.hpa_page.add(gpa.offset())),
        Some(e) => Err(Fault::EptViolation {
            gva,
            gpa,
            access,
            suppress_ve: e.suppress_ve,
        }),
        None => Err(Fault::EptViolation {
            gva,
            gpa,
            access,
            suppress_ve: false,
        }),
    }
}

/// Translate through the CPU's current EPT, delivering #VE when the
/// violation is not suppressed and the mask is clear.
pub fn translate(
    machine: &mut Machine,
    cpu: &CpuState,
    gva: Address,
    access: AccessKind,
) -> TranslationOutcome {
    machine.translate(cpu, gva, access)
}
