//! Attack demonstrations, each with the outcome the architecture should
//! produce.

use std::fmt;

use crate::addr::Address;
use crate::cpu::{self, Exit, Injection};
use crate::error::{Result, SimError};
use crate::machine::{layout, Machine, MachineConfig};
use crate::policy::{parse_policy, SymbolTable};
use crate::sim::Simulation;
use crate::trace::{SwitchKind, TraceEvent, TraceRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackKind {
    RemapHlatOn,
    RemapHlatOff,
    VmfuncInsert,
    InvalidCall,
    IntStackCorrupt,
}

impl AttackKind {
    pub const ALL: [AttackKind; 5] = [
        AttackKind::RemapHlatOn,
        AttackKind::RemapHlatOff,
        AttackKind::VmfuncInsert,
        AttackKind::InvalidCall,
        AttackKind::IntStackCorrupt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttackKind::RemapHlatOn => "remap-hlat-on",
            AttackKind::RemapHlatOff => "remap-hlat-off",
            AttackKind::VmfuncInsert => "vmfunc-insert",
            AttackKind::InvalidCall => "invalid-call",
            AttackKind::IntStackCorrupt => "int-stack-corrupt",
        }
    }

    pub fn from_name(name: &str) -> Option<AttackKind> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }

    pub fn expected(self) -> Outcome {
        match self {
            AttackKind::RemapHlatOff => Outcome::Succeeded,
            _ => Outcome::Blocked,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Blocked,
    Succeeded,
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Outcome::Blocked => "blocked",
            Outcome::Succeeded => "succeeded",
        })
    }
}

#[derive(Debug, Clone)]
pub struct AttackReport {
    pub kind: AttackKind,
    pub observed: Outcome,
    pub detail: String,
    pub trace: Vec<TraceRecord>,
}

impl AttackReport {
    pub fn as_expected(&self) -> bool {
        self.observed == self.kind.expected()
    }
}

impl fmt::Display for AttackReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.as_expected() { "PASS" } else { "FAIL" };
        write!(
            f,
            "{}: {} (expected {}) {verdict}\n  {}",
            self.kind.name(),
            self.observed,
            self.kind.expected(),
            self.detail
        )
    }
}

/// Compartment k ≥ 1 owns `fn_k` and `obj_k`; the default compartment owns
/// `fn_0`, `obj_0` and may call `fn_1`.
pub fn attack_policy(compartments: usize) -> String {
    let mut text =
        String::from("cmpt_id: 0\ncan_call: fn_1 (cmpt_id=1)\nexecution_context: euid = any\n");
    for k in 1..compartments {
        text.push_str(&format!(
            "\ncmpt_id: {k}\ncan_execute: fn_{k}, secret_fn_{k}\ncan_read: obj_{k}\ncan_write: obj_{k}\nexecution_context: euid = {k}\n"
        ));
    }
    text
}

/// Symbol declarations every attack scenario shares.
fn common_symbols(compartments: usize) -> String {
    let mut text = String::from("object obj_0 size 8\nobject evil size 4096\n");
    for k in 1..compartments {
        text.push_str(&format!(
            "object obj_{k} size 8 = 0x5afe\nfunc secret_fn_{k}\n    write obj_{k} 0xbad\n    mov rax 0xbad\n    ret\nend\n"
        ));
    }
    text
}

fn build(compartments: usize, body: &str, config: MachineConfig) -> Result<Simulation> {
    let policies = parse_policy(&attack_policy(compartments))?;
    let mut text = format!("{body}\n{}", common_symbols(compartments));
    for k in 1..compartments {
        if !body.contains(&format!("func fn_{k}\n")) {
            text.push_str(&format!("func fn_{k}\n    ret\nend\n"));
        }
    }
    Simulation::build(&policies, &SymbolTable::new(), &text, config)
}

fn backing_word(m: &Machine, gva: Address) -> u64 {
    m.mem.read_word(Machine::backing_hpa(gva))
}

fn switched_into(trace: &[TraceRecord], cmpt: usize) -> bool {
    trace.iter().any(
        |r| matches!(r.event, TraceEvent::Switch { to, kind: SwitchKind::Call, .. } if to == cmpt),
    )
}

/// The attacker in the default compartment points the sentry row's GVA at
/// a page it owns, writes a row that allows a call into compartment 1, and
/// makes that call.
fn remap(hlat: bool) -> Result<AttackReport> {
    let ro = layout::SENTRY_RO.0;
    let body = format!(
        "entry: fn_0
func fn_0
    ptmap {ro:#x} evil
    write {ro:#x} 0
    write {:#x} 1
    write {:#x} secret_fn_1
    write {:#x} 1
    write {:#x} 0xffffffffffffffff
    call secret_fn_1
    halt
end
func fn_1
    ret
end
",
        ro + 8,
        ro + 16,
        ro + 24,
        ro + 32
    );
    let config = MachineConfig {
        hlat_enabled: hlat,
        ..MachineConfig::default()
    };
    let mut s = build(2, &body, config)?;
    let r = s.run(500)?;
    let evil = s.scenario.symbols.get("evil").unwrap().gva;
    let landed = backing_word(&s.machine, evil.add(16)) != 0;
    let obj = s.scenario.symbols.get("obj_1").unwrap().gva;
    let escalated = switched_into(&s.machine.trace, 1) && backing_word(&s.machine, obj) == 0xbad;
    let observed = if escalated {
        Outcome::Succeeded
    } else {
        Outcome::Blocked
    };
    let detail = format!(
        "forged row write {}; call into compartment 1 {}; run ended with {}",
        if landed { "landed" } else { "faulted" },
        if escalated {
            "reached the callee"
        } else {
            "denied"
        },
        r.outcome.name()
    );
    Ok(AttackReport {
        kind: if hlat {
            AttackKind::RemapHlatOn
        } else {
            AttackKind::RemapHlatOff
        },
        observed,
        detail,
        trace: s.machine.take_trace(),
    })
}

/// Result of one (source, destination) vmfunc insertion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InsertionResult {
    pub source: usize,
    pub dest: usize,
    /// A #VE was raised after the switch and before anything retired in the
    /// destination.
    pub ve_first: bool,
    /// The destination's object is unchanged.
    pub memory_untouched: bool,
}

impl InsertionResult {
    pub fn contained(&self) -> bool {
        self.ve_first && self.memory_untouched
    }
}

/// Code in `source` executes `vmfunc dest` followed by a write to the
/// destination's private object.
pub fn vmfunc_insertion(
    compartments: usize,
    source: usize,
    dest: usize,
) -> Result<InsertionResult> {
    insertion_run(compartments, source, dest).map(|(r, _)| r)
}

fn insertion_run(
    compartments: usize,
    source: usize,
    dest: usize,
) -> Result<(InsertionResult, Vec<TraceRecord>)> {
    if source == dest || source >= compartments || dest >= compartments {
        return Err(SimError::Scenario(format!(
            "bad insertion pair {source} -> {dest}"
        )));
    }
    let body = format!(
        "entry: fn_{source}\nstart_cmpt: {source}\nfunc fn_{source}\n    vmfunc {dest}\n    write obj_{dest} 0xbad\n    halt\nend\n"
    );
    let mut s = build(compartments, &body, MachineConfig::default())?;
    s.run(100)?;
    let obj = s.scenario.symbols.get(&format!("obj_{dest}")).unwrap().gva;
    let before = if dest == 0 { 0 } else { 0x5afe };
    let trace = &s.machine.trace;
    let sw = trace
        .iter()
        .position(|r| matches!(r.event, TraceEvent::Switch { to, kind: SwitchKind::Vmfunc, .. } if to == dest));
    let ve_first = sw.is_some_and(|i| {
        trace[i + 1..]
            .iter()
            .find(|r| !matches!(r.event, TraceEvent::Access { .. }))
            .is_some_and(|r| matches!(r.event, TraceEvent::Ve(_)))
    }) && !sw.is_some_and(|i| {
        trace[i + 1..]
            .iter()
            .any(|r| matches!(r.event, TraceEvent::Retired { ept, .. } if ept == dest))
    });
    let r = InsertionResult {
        source,
        dest,
        ve_first,
        memory_untouched: backing_word(&s.machine, obj) == before,
    };
    Ok((r, s.machine.take_trace()))
}

/// Every ordered pair of distinct compartments.
pub fn vmfunc_insertion_sweep(compartments: usize) -> Result<Vec<InsertionResult>> {
    let mut out = Vec::new();
    for source in 0..compartments {
        for dest in 0..compartments {
            if source != dest {
                out.push(vmfunc_insertion(compartments, source, dest)?);
            }
        }
    }
    Ok(out)
}

fn vmfunc_insert() -> Result<AttackReport> {
    let (r, trace) = insertion_run(2, 0, 1)?;
    let observed = if r.contained() {
        Outcome::Blocked
    } else {
        Outcome::Succeeded
    };
    let detail = format!(
        "#VE before any effect in compartment 1: {}; object untouched: {}",
        r.ve_first, r.memory_untouched
    );
    Ok(AttackReport {
        kind: AttackKind::VmfuncInsert,
        observed,
        detail,
        trace,
    })
}

fn invalid_call() -> Result<AttackReport> {
    let body =
        "entry: fn_0\nfunc fn_0\n    call secret_fn_1\n    halt\nend\nfunc fn_1\n    ret\nend\n";
    let mut s = build(2, body, MachineConfig::default())?;
    let r = s.run(100)?;
    let obj = s.scenario.symbols.get("obj_1").unwrap().gva;
    let reached = switched_into(&s.machine.trace, 1) || backing_word(&s.machine, obj) != 0x5afe;
    let observed = if reached {
        Outcome::Succeeded
    } else {
        Outcome::Blocked
    };
    let detail = match s.machine.violations.first() {
        Some(v) => format!("run ended with {}; {v}", r.outcome.name()),
        None => format!("run ended with {}", r.outcome.name()),
    };
    Ok(AttackReport {
        kind: AttackKind::InvalidCall,
        observed,
        detail,
        trace: s.machine.take_trace(),
    })
}

/// Compartment 1 fills the top of the interrupt stack with a forged
/// compartment id and magic before an interrupt arrives.
fn int_stack_corrupt() -> Result<AttackReport> {
    let top = layout::INT_STACK_TOP.0;
    let body = format!(
        "entry: fn_0
euid: 1
func fn_0
    mov rdi 3
    call fn_1
    halt
end
func fn_1
    write {:#x} 0
    write {:#x} 0x7ffff00d00000003
    mov rax 5
    nop
    nop
    ret
end
",
        top - 16,
        top - 24
    );
    let clean = {
        let mut s = build(2, &body, MachineConfig::default())?;
        s.run(500)?;
        s.cpu
    };
    let mut s = build(2, &body, MachineConfig::default())?;
    let inj = [Injection {
        after_step: 9,
        vector: 32,
        error_code: None,
    }];
    let r = cpu::run(&mut s.machine, &mut s.cpu, 500, &inj)?;
    let delivered_in_1 = s
        .machine
        .trace
        .iter()
        .any(|r| matches!(r.event, TraceEvent::InterruptDelivered { ept: 1, .. }));
    let normal = r.outcome == Exit::Halt && s.cpu == clean && s.machine.violations.is_empty();
    let observed = if normal && delivered_in_1 {
        Outcome::Blocked
    } else {
        Outcome::Succeeded
    };
    let detail = format!(
        "interrupt taken in compartment 1: {delivered_in_1}; resumed with identical state: {}",
        s.cpu == clean
    );
    Ok(AttackReport {
        kind: AttackKind::IntStackCorrupt,
        observed,
        detail,
        trace: s.machine.take_trace(),
    })
}

pub fn run_attack(kind: AttackKind) -> Result<AttackReport> {
    match kind {
        AttackKind::RemapHlatOn => remap(true),
        AttackKind::RemapHlatOff => remap(false),
        AttackKind::VmfuncInsert => vmfunc_insert(),
        AttackKind::InvalidCall => invalid_call(),
        AttackKind::IntStackCorrupt => int_stack_corrupt(),
    }
}
