//! The gate manager: compiles an access matrix into per-compartment EPTs,
//! the EPTP list, HLAT entries and the sentry regions, and adjudicates
//! violations reported by the sentry or by VM exits.

use std::collections::BTreeSet;

use crate::addr::{AccessKind, Address, Permission, PAGE_SIZE};
use crate::cpu::{CpuState, Instruction};
use crate::error::{Result, SimError};
use crate::machine::{layout, Machine};
use crate::mem::{Ept, HlatEntry, EPTP_CAPACITY};
use crate::policy::{check_layout, AccessMatrix, Severity};
use crate::sentry::{MAGIC_CALL, MAGIC_INT_ERR, MAGIC_INT_NOERR};
use crate::trace::{TraceEvent, ViolationRecord};

/// Vectors for which the processor pushes an error code.
pub const ERROR_CODE_VECTORS: [u8; 10] = [8, 10, 11, 12, 13, 14, 17, 21, 29, 30];

pub fn vector_has_error_code(vector: u8) -> bool {
    ERROR_CODE_VECTORS.contains(&vector)
}

/// Outcome of a vmcall into the gate manager.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    PolicyViolation(ViolationRecord),
    Allowed,
}

/// Words in a sentry read-only row: id, count, then one triple per entry.
fn row_words(entries: usize) -> usize {
    2 + 3 * entries
}

fn map_layout_page(
    ept: &mut Ept,
    page: Address,
    hpa: Address,
    perms: Permission,
    suppress_ve: bool,
) -> Result<()> {
    ept.map(page, hpa, perms, suppress_ve)
}

fn stack_pages(machine: &Machine, cmpt: usize) -> impl Iterator<Item = Address> {
    let base = layout::stack_base(cmpt, machine.config.stack_pages);
    (0..machine.config.stack_pages).map(move |i| base.add(i * PAGE_SIZE))
}

/// Build every compartment's EPT, the EPTP list, HLAT and guest page table
/// from `matrix`, then install sentry code, rows and IDT images.
pub fn init_compartments(machine: &mut Machine, matrix: &AccessMatrix) -> Result<()> {
    for sym in matrix.symbols.iter() {
        if sym.gva.0 < layout::RESERVED_END && sym.end().0 > layout::RESERVED_START {
            return Err(SimError::ReservedOverlap(sym.name.clone()));
        }
    }
    let errors: Vec<String> = check_layout(matrix, &matrix.symbols)
        .into_iter()
        .filter(|d| d.severity == Severity::Error)
        .map(|d| d.to_string())
        .collect();
    if !errors.is_empty() {
        return Err(SimError::Layout(errors.join("; ")));
    }

    let n = matrix.compartment_count().max(1);
    if n > EPTP_CAPACITY {
        return Err(SimError::EptpCapacity(n));
    }
    for (c, row) in &matrix.rows {
        if row_words(row.can_call.len()) * 8 > PAGE_SIZE as usize {
            return Err(SimError::RowCapacity(*c));
        }
    }

    machine.epts.clear();
    machine.eptp = Default::default();
    for c in 0..n {
        machine.epts.push(Ept::new(c));
        machine.eptp.push(c)?;
    }
    machine.irq_enabled = vec![true; n];

    let guest_pages = matrix.guest_pages();
    let private = matrix.compartmentalized_pages();
    let row0 = matrix.row(0);

    // Guest pages.
    for &page in &guest_pages {
        machine.guest_pt.map(page, page)?;
        let hpa = Machine::backing_hpa(page);
        let perms = match row0.and_then(|r| r.page_perms(page)) {
            Some(p) => Some(p),
            None if private.contains(&page) => None,
            None => Some(Permission::RWX),
        };
        if let Some(p) = perms {
            machine.epts[0].map(page, hpa, p, false)?;
        }
    }
    for (c, row) in matrix.rows.iter().filter(|(c, _)| **c != 0) {
        for (page, perms) in &row.pages {
            machine.epts[*c].map(*page, Machine::backing_hpa(*page), *perms, false)?;
        }
    }
    for &page in &private {
        machine.hlat.insert(page, HlatEntry::Fixed(page))?;
    }

    // Gate layout pages.
    let mut layout_pages = vec![
        layout::SENTRY_CODE,
        layout::SENTRY_RO,
        layout::SENTRY_RW,
        layout::INT_STACK,
        layout::IDT,
        layout::INT_RESUME_STUB,
        layout::PAGE_TABLE_REGION,
    ];
    layout_pages.extend((0..layout::HANDLER_PAGES).map(|i| layout::HANDLERS.add(i * PAGE_SIZE)));
    for c in 0..n {
        layout_pages.extend(stack_pages(machine, c));
    }
    for &page in &layout_pages {
        machine.guest_pt.map(page, page)?;
        machine.hlat.insert(page, HlatEntry::Fixed(page))?;
    }

    let shared = Machine::backing_hpa;
    for c in 0..n {
        let ro_hpa = if c == 0 {
            shared(layout::SENTRY_RO)
        } else {
            machine.alloc_alt_page()
        };
        let idt_hpa = if c == 0 {
            shared(layout::IDT)
        } else {
            machine.alloc_alt_page()
        };
        let ept = &mut machine.epts[c];
        map_layout_page(
            ept,
            layout::SENTRY_CODE,
            shared(layout::SENTRY_CODE),
            Permission::RX,
            false,
        )?;
        map_layout_page(ept, layout::SENTRY_RO, ro_hpa, Permission::R, true)?;
        map_layout_page(
            ept,
            layout::SENTRY_RW,
            shared(layout::SENTRY_RW),
            Permission::RW,
            false,
        )?;
        map_layout_page(
            ept,
            layout::INT_STACK,
            shared(layout::INT_STACK),
            Permission::RW,
            false,
        )?;
        map_layout_page(ept, layout::IDT, idt_hpa, Permission::R, true)?;
        if c == 0 {
            map_layout_page(
                ept,
                layout::PAGE_TABLE_REGION,
                shared(layout::PAGE_TABLE_REGION),
                Permission::RW,
                false,
            )?;
            for i in 0..layout::HANDLER_PAGES {
                let page = layout::HANDLERS.add(i * PAGE_SIZE);
                map_layout_page(ept, page, shared(page), Permission::RX, false)?;
            }
        }
        let base = layout::stack_base(c, machine.config.stack_pages);
        for i in 0..machine.config.stack_pages {
            let page = base.add(i * PAGE_SIZE);
            machine.epts[c].map(page, shared(page), Permission::RW, false)?;
        }

        // Read-only row.
        let entries = matrix
            .row(c)
            .map(|r| r.can_call.clone())
            .unwrap_or_default();
        machine.mem.write_word(ro_hpa, c as u64);
        machine.mem.write_word(ro_hpa.add(8), entries.len() as u64);
        for (i, e) in entries.iter().enumerate() {
            let at = ro_hpa.add(16 + 24 * i as u64);
            machine.mem.write_word(at, e.callee_gva.0);
            machine.mem.write_word(at.add(8), e.target as u64);
            machine.mem.write_word(at.add(16), e.context.encode());
        }

        // Saved stack pointer slot.
        let top = machine.stack_top(c);
        machine.load_word(layout::rw_slot(c), top.0);
    }

    check_magic(machine)?;
    machine.matrix = Some(matrix.clone());
    install_interrupt_sentries(machine);
    Ok(())
}

fn check_magic(machine: &Machine) -> Result<()> {
    let mut mapped: BTreeSet<Address> = BTreeSet::new();
    for ept in &machine.epts {
        mapped.extend(ept.entries().map(|(gpa, _)| gpa));
    }
    for magic in [MAGIC_CALL, MAGIC_INT_NOERR, MAGIC_INT_ERR] {
        let page = Address(magic).page();
        if mapped.contains(&page) || machine.guest_pt.lookup(page).is_some() {
            return Err(SimError::MagicCollision(page));
        }
    }
    Ok(())
}

/// Write sentry entry tokens, default handlers and the IDT images. The
/// default compartment's IDT points at the handlers; every other
/// compartment's image, at the same GPA but a different host page, points at
/// the interrupt sentry for each vector.
pub fn install_interrupt_sentries(machine: &mut Machine) {
    machine.load_insn(layout::VE_ENTRY, Instruction::VeSentry);
    for v in 0..=255u8 {
        machine.load_insn(layout::int_sentry_entry(v), Instruction::IntSentry(v));

        let h = layout::default_handler(v);
        machine.load_insn(h, Instruction::HandlerBody(v as u64));
        if vector_has_error_code(v) {
            machine.load_insn(h.add(8), Instruction::DropWord);
            machine.load_insn(h.add(16), Instruction::Iretq);
        } else {
            machine.load_insn(h.add(8), Instruction::Iretq);
        }

        let handler = machine.handler_overrides.get(&v).copied().unwrap_or(h);
        machine.load_word(layout::idt_slot(v), handler.0);
    }
    for c in 1..machine.epts.len() {
        let idt_hpa = machine.epts[c]
            .entry(layout::IDT)
            .expect("IDT mapped")
            .hpa_page;
        for v in 0..=255u8 {
            machine
                .mem
                .write_word(idt_hpa.add(8 * v as u64), layout::int_sentry_entry(v).0);
        }
    }
}

/// Record a violation and halt the offending thread.
pub fn handle_vmcall_violation(
    machine: &mut Machine,
    cpu: &mut CpuState,
    record: ViolationRecord,
) -> Verdict {
    machine.violations.push(record.clone());
    machine.emit(TraceEvent::Violation(record.clone()));
    cpu.halted = true;
    Verdict::PolicyViolation(record)
}

pub(crate) fn violation(
    cmpt: usize,
    gva: Address,
    gpa: Option<Address>,
    access: Option<AccessKind>,
    reason: impl Into<String>,
) -> ViolationRecord {
    ViolationRecord {
        source_cmpt: cmpt,
        gva,
        gpa,
        access,
        reason: reason.into(),
    }
}

/// Decode compartment `cmpt`'s read-only row as the gate laid it out.
pub fn read_ro_row(machine: &Machine, cmpt: usize) -> Option<(u64, Vec<(Address, u64, u64)>)> {
    let hpa = machine
        .ept_by_slot(cmpt)?
        .entry(layout::SENTRY_RO)?
        .hpa_page;
    let id = machine.mem.read_word(hpa);
    let count = machine.mem.read_word(hpa.add(8));
    let entries = (0..count.min(170))
        .map(|i| {
            let at = hpa.add(16 + 24 * i);
            (
                Address(machine.mem.read_word(at)),
                machine.mem.read_word(at.add(8)),
                machine.mem.read_word(at.add(16)),
            )
        })
        .collect();
    Some((id, entries))
}
