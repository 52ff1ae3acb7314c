//! The #VE handler and the interrupt sentry.
//!
//! Both run as trusted code entered through tokens on the sentry code page.
//! Their memory accesses go through the current EPT exactly like guest
//! accesses, but a fault traps to the gate manager instead of raising #VE.

use crate::addr::{AccessKind, Address};
use crate::cpu::{encode_rflags, rflags_if, CpuState, HardwareFrame, Instruction};
use crate::gate::{self, vector_has_error_code};
use crate::machine::{layout, Machine};
use crate::mem::Fault;
use crate::policy::ExecutionContext;
use crate::trace::{SwitchKind, TraceEvent, ViolationRecord};

pub const MAGIC_CALL: u64 = 0x7FFF_F00D_0000_0001;
pub const MAGIC_INT_NOERR: u64 = 0x7FFF_F00D_0000_0002;
pub const MAGIC_INT_ERR: u64 = 0x7FFF_F00D_0000_0003;

/// Registers saved by the interrupt sentry: rax, the six argument registers
/// and the six callee-saved registers.
pub const SAVED_REGS: u64 = 13;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ControlTransfer {
    ToCallee { cmpt: usize, gva: Address },
    ToCaller { cmpt: usize, gva: Address },
    ToHandler(u8),
    ToInterrupted { cmpt: usize, gva: Address },
    ViolationTrap,
}

/// Which branch the #VE handler takes for a key read at the frame's RSP.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Path {
    Call,
    Return,
    InterruptReturn { error_code: bool },
}

pub fn classify(key: u64) -> Path {
    match key {
        MAGIC_CALL => Path::Return,
        MAGIC_INT_NOERR => Path::InterruptReturn { error_code: false },
        MAGIC_INT_ERR => Path::InterruptReturn { error_code: true },
        _ => Path::Call,
    }
}

type Step<T> = Result<T, ViolationRecord>;

fn fault_record(cmpt: usize, fault: Fault, what: &str) -> ViolationRecord {
    match fault {
        Fault::EptViolation {
            gva, gpa, access, ..
        } => gate::violation(
            cmpt,
            gva,
            Some(gpa),
            Some(access),
            format!("sentry {what} faulted"),
        ),
        Fault::GuestPageFault(gva) => {
            gate::violation(cmpt, gva, None, None, format!("sentry {what} page fault"))
        }
    }
}

struct Sentry<'a> {
    m: &'a mut Machine,
    cpu: &'a mut CpuState,
}

impl Sentry<'_> {
    fn read(&mut self, gva: Address) -> Step<u64> {
        let slot = self.cpu.current_ept;
        self.m
            .read_word_as(slot, gva)
            .map_err(|f| fault_record(slot, f, "read"))
    }

    fn write(&mut self, gva: Address, value: u64) -> Step<()> {
        let slot = self.cpu.current_ept;
        self.m
            .write_word_as(slot, gva, value)
            .map_err(|f| fault_record(slot, f, "write"))
    }

    fn push(&mut self, value: u64) -> Step<()> {
        let sp = self.cpu.rsp.sub(8);
        self.write(sp, value)?;
        self.cpu.rsp = sp;
        Ok(())
    }

    fn pop(&mut self) -> Step<u64> {
        let v = self.read(self.cpu.rsp)?;
        self.cpu.rsp = self.cpu.rsp.add(8);
        Ok(v)
    }

    fn read_frame(&mut self, at: Address) -> Step<HardwareFrame> {
        let mut w = [0u64; 5];
        for (i, slot) in w.iter_mut().enumerate() {
            *slot = self.read(at.add(8 * i as u64))?;
        }
        Ok(HardwareFrame::from_words(w))
    }

    fn push_frame(&mut self, frame: &HardwareFrame) -> Step<()> {
        for w in frame.words().iter().rev() {
            self.push(*w)?;
        }
        Ok(())
    }

    fn write_frame(&mut self, at: Address, frame: &HardwareFrame) -> Step<()> {
        for (i, w) in frame.words().iter().enumerate() {
            self.write(at.add(8 * i as u64), *w)?;
        }
        Ok(())
    }

    /// vmfunc from inside the sentry.
    fn switch(&mut self, to: usize, kind: SwitchKind, target: Address) -> Step<()> {
        let from = self.cpu.current_ept;
        if to >= self.m.eptp.len() {
            return Err(gate::violation(
                from,
                target,
                None,
                None,
                format!("compartment id {to} out of range"),
            ));
        }
        let rip = self.cpu.rip;
        self.m.emit(TraceEvent::Retired {
            ept: from,
            rip,
            insn: Instruction::Vmfunc(to as u64),
        });
        self.m.emit(TraceEvent::Switch {
            from,
            to,
            kind,
            target,
        });
        self.cpu.current_ept = to;
        Ok(())
    }

    fn iretq(&mut self) -> Step<Address> {
        let frame = self.read_frame(self.cpu.rsp)?;
        let rip = self.cpu.rip;
        self.m.emit(TraceEvent::Retired {
            ept: self.cpu.current_ept,
            rip,
            insn: Instruction::Iretq,
        });
        self.cpu.rip = frame.rip;
        self.cpu.rsp = frame.rsp;
        self.cpu.rflags_if = rflags_if(frame.rflags);
        Ok(frame.rip)
    }

    fn rw_slot_read(&mut self, cmpt: usize) -> Step<Address> {
        self.read(layout::rw_slot(cmpt)).map(Address)
    }

    fn ve_handler(&mut self) -> Step<ControlTransfer> {
        let cur = self.cpu.current_ept;
        let info = self.m.ve_info;
        if !info.mask {
            return Err(gate::violation(
                cur,
                self.cpu.rip,
                None,
                None,
                "sentry entered without a #VE",
            ));
        }
        if info.exit_qualification != Some(AccessKind::Execute) {
            return Err(gate::violation(
                cur,
                info.faulting_gva,
                Some(info.faulting_gpa),
                info.exit_qualification,
                "data access outside the compartment",
            ));
        }
        let frame = self.read_frame(self.cpu.rsp)?;
        let key = self.read(frame.rsp)?;
        match classify(key) {
            Path::Call => self.call_path(frame, Address(key)),
            Path::Return => self.return_path(frame),
            Path::InterruptReturn { error_code } => self.interrupt_return_path(frame, error_code),
        }
    }

    fn call_path(&mut self, frame: HardwareFrame, ret_addr: Address) -> Step<ControlTransfer> {
        let caller = self.cpu.current_ept;
        let callee = frame.rip;
        let euid = (caller == 0).then_some(self.cpu.euid);

        let row_id = self.read(layout::SENTRY_RO)?;
        if row_id != caller as u64 {
            return Err(gate::violation(
                caller,
                layout::SENTRY_RO,
                None,
                None,
                "sentry row belongs to another compartment",
            ));
        }
        let count = self.read(layout::SENTRY_RO.add(8))?;
        let mut target = None;
        for i in 0..count.min(170) {
            let at = layout::SENTRY_RO.add(16 + 24 * i);
            if self.read(at)? != callee.0 {
                continue;
            }
            let ctx = ExecutionContext::decode(self.read(at.add(16))?);
            if euid.is_none_or(|e| ctx.matches(e)) {
                target = Some(self.read(at.add(8))? as usize);
                break;
            }
        }
        let Some(target) = target else {
            let mut reason = String::from("no matching can_call entry");
            if let Some(e) = euid {
                reason.push_str(&format!(" for euid {e}"));
            }
            return Err(gate::violation(
                caller,
                callee,
                None,
                Some(AccessKind::Execute),
                reason,
            ));
        };

        for i in 0..6 {
            let v = self.cpu.callee_saved[i];
            self.push(v)?;
        }
        let sp = self.cpu.rsp;
        self.write(layout::rw_slot(caller), sp.0)?;
        self.switch(target, SwitchKind::Call, callee)?;
        self.cpu.rsp = self.rw_slot_read(target)?;
        self.push(caller as u64)?;
        self.push(MAGIC_CALL)?;
        self.push(ret_addr.0)?;
        let ret_slot = self.cpu.rsp;
        let irq =
            rflags_if(frame.rflags) && self.m.irq_enabled.get(target).copied().unwrap_or(true);
        self.push_frame(&HardwareFrame::new(callee, encode_rflags(irq), ret_slot))?;
        self.m.ve_info.mask = false;
        self.iretq()?;
        Ok(ControlTransfer::ToCallee {
            cmpt: target,
            gva: callee,
        })
    }

    fn return_path(&mut self, frame: HardwareFrame) -> Step<ControlTransfer> {
        let callee = self.cpu.current_ept;
        self.cpu.rsp = frame.rsp.add(8);
        self.m.ve_info.mask = false;
        let caller = self.pop()? as usize;
        let clean = self.cpu.rsp;
        self.write(layout::rw_slot(callee), clean.0)?;
        self.switch(caller, SwitchKind::Ret, frame.rip)?;
        self.cpu.rsp = self.rw_slot_read(caller)?;
        for i in (0..6).rev() {
            self.cpu.callee_saved[i] = self.pop()?;
        }
        let at = self.cpu.rsp;
        let mut caller_frame = self.read_frame(at)?;
        let ret = self.read(caller_frame.rsp)?;
        caller_frame.rip = Address(ret);
        caller_frame.rsp = caller_frame.rsp.add(8);
        self.write_frame(at, &caller_frame)?;
        let gva = self.iretq()?;
        Ok(ControlTransfer::ToCaller { cmpt: caller, gva })
    }

    fn interrupt_sentry(&mut self, vector: u8) -> Step<ControlTransfer> {
        let c = self.cpu.current_ept;
        if c == 0 || self.cpu.rflags_if {
            return Err(gate::violation(
                c,
                self.cpu.rip,
                None,
                None,
                "interrupt sentry entered outside interrupt delivery",
            ));
        }
        let err = vector_has_error_code(vector);
        let regs: Vec<u64> = std::iter::once(self.cpu.rax)
            .chain(self.cpu.args)
            .chain(self.cpu.callee_saved)
            .collect();
        for v in regs {
            self.push(v)?;
        }
        let saved = self.cpu.rsp;
        self.write(layout::rw_slot(c), saved.0)?;
        let above = saved.add(8 * SAVED_REGS);
        let (code, orig) = if err {
            (Some(self.read(above)?), self.read_frame(above.add(8))?)
        } else {
            (None, self.read_frame(above)?)
        };

        // The handler may itself call into a compartment, which overwrites
        // the default compartment's slot; keep it for the interrupted code.
        let default_slot = self.read(layout::rw_slot(0))?;
        self.cpu.rsp = layout::INT_STACK_TOP;
        self.push(default_slot)?;
        self.push(c as u64)?;
        self.push(if err { MAGIC_INT_ERR } else { MAGIC_INT_NOERR })?;
        let magic_slot = self.cpu.rsp;
        let resume = if self.m.probe(0, orig.rip, AccessKind::Execute).is_ok() {
            layout::INT_RESUME_STUB
        } else {
            orig.rip
        };
        self.push_frame(&HardwareFrame::new(
            resume,
            encode_rflags(false),
            magic_slot,
        ))?;
        if let Some(code) = code {
            self.push(code)?;
        }
        self.switch(0, SwitchKind::Int, orig.rip)?;
        self.cpu.rip = Address(self.read(layout::idt_slot(vector))?);
        Ok(ControlTransfer::ToHandler(vector))
    }

    fn interrupt_return_path(&mut self, frame: HardwareFrame, err: bool) -> Step<ControlTransfer> {
        let c = self.read(frame.rsp.add(8))? as usize;
        self.m.ve_info.mask = false;
        let saved_rip = frame.rip;
        if c == 0 {
            return Err(gate::violation(
                0,
                frame.rsp,
                None,
                None,
                "interrupt return names the default compartment",
            ));
        }
        let default_slot = self.read(frame.rsp.add(16))?;
        self.write(layout::rw_slot(0), default_slot)?;
        self.switch(c, SwitchKind::Iret, saved_rip)?;
        self.cpu.rsp = self.rw_slot_read(c)?;
        if saved_rip != layout::INT_RESUME_STUB {
            let rip_slot = self.cpu.rsp.add(8 * SAVED_REGS + if err { 8 } else { 0 });
            self.write(rip_slot, saved_rip.0)?;
        }
        for i in (0..6).rev() {
            self.cpu.callee_saved[i] = self.pop()?;
        }
        for i in (0..6).rev() {
            self.cpu.args[i] = self.pop()?;
        }
        self.cpu.rax = self.pop()?;
        if err {
            self.cpu.rsp = self.cpu.rsp.add(8);
        }
        let gva = self.iretq()?;
        Ok(ControlTransfer::ToInterrupted { cmpt: c, gva })
    }
}

fn finish(m: &mut Machine, cpu: &mut CpuState, r: Step<ControlTransfer>) -> ControlTransfer {
    match r {
        Ok(t) => t,
        Err(rec) => {
            gate::handle_vmcall_violation(m, cpu, rec);
            ControlTransfer::ViolationTrap
        }
    }
}

/// Dispatch on the key at the #VE frame's RSP: the caller's return address
/// selects the call path, `MAGIC_CALL` the return path and the interrupt
/// magics the interrupt-return path.
pub fn ve_handler(m: &mut Machine, cpu: &mut CpuState) -> ControlTransfer {
    let r = Sentry {
        m: &mut *m,
        cpu: &mut *cpu,
    }
    .ve_handler();
    finish(m, cpu, r)
}

/// Forward an interrupt taken in a non-default compartment to the default
/// compartment's handler through the interrupt stack.
pub fn interrupt_sentry(m: &mut Machine, cpu: &mut CpuState, vector: u8) -> ControlTransfer {
    let r = Sentry {
        m: &mut *m,
        cpu: &mut *cpu,
    }
    .interrupt_sentry(vector);
    finish(m, cpu, r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cpu::{self, Exit, Injection};
    use crate::fixtures::{events, sim};
    use crate::trace::{count_switches, count_ve};

    const ROUND_TRIP: &str = "entry: foo
object obj1 size 8
func foo
    mov rdi 5
    mov rbx 0x11
    mov r15 0x15
    call func1
    halt
end
func func1
    write obj1 7
    mov rbx 0x99
    mov rax 42
    ret
end
";

    #[test]
    fn dispatch_on_key() {
        assert_eq!(classify(0x1018), Path::Call);
        assert_eq!(classify(MAGIC_CALL), Path::Return);
        assert_eq!(
            classify(MAGIC_INT_NOERR),
            Path::InterruptReturn { error_code: false }
        );
        assert_eq!(
            classify(MAGIC_INT_ERR),
            Path::InterruptReturn { error_code: true }
        );
    }

    #[test]
    fn call_return_round_trip() {
        let mut s = sim(ROUND_TRIP);
        let rsp0 = s.cpu.rsp;
        let slot2 = s.machine.peek(2, layout::rw_slot(2));
        assert_eq!(s.run(1000).unwrap().outcome, Exit::Halt);
        let trace = &s.machine.trace;
        assert_eq!(count_switches(trace, None), 2);
        assert_eq!(count_switches(trace, Some(SwitchKind::Call)), 1);
        assert_eq!(count_switches(trace, Some(SwitchKind::Ret)), 1);
        assert_eq!(count_ve(trace), 2);
        assert_eq!(s.cpu.rax, 42);
        assert_eq!(s.cpu.callee_saved[0], 0x11);
        assert_eq!(s.cpu.callee_saved[5], 0x15);
        assert_eq!(s.cpu.rsp, rsp0);
        assert_eq!(s.cpu.current_ept, 0);
        assert!(s.cpu.rflags_if);
        assert_eq!(s.machine.peek(2, layout::rw_slot(2)), slot2);
        assert_eq!(s.machine.peek(2, Address(0x3000)), Some(7));
    }

    #[test]
    fn callee_stack_layout_on_entry() {
        let mut s = sim(ROUND_TRIP);
        while !(s.cpu.current_ept == 2 && s.cpu.rip == Address(0x5000)) {
            assert!(cpu::step(&mut s.machine, &mut s.cpu).is_none());
        }
        let ret = s.scenario.symbols.get("foo").unwrap().gva.add(32);
        let top = s.machine.stack_top(2);
        assert_eq!(s.cpu.rsp, top.sub(24));
        assert_eq!(s.machine.peek(2, s.cpu.rsp), Some(ret.0));
        assert_eq!(s.machine.peek(2, s.cpu.rsp.add(8)), Some(MAGIC_CALL));
        assert_eq!(s.machine.peek(2, s.cpu.rsp.add(16)), Some(0));
        assert_eq!(s.cpu.args[0], 5);
        assert!(!s.machine.ve_info.mask);
    }

    #[test]
    fn wrong_euid_from_default_is_denied() {
        let mut s = sim(&ROUND_TRIP.replace("entry: foo", "entry: foo\neuid: 1000"));
        assert_eq!(s.run(1000).unwrap().outcome, Exit::Violation);
        assert!(matches!(events(&s).last(), Some(TraceEvent::Violation(_))));
        assert_eq!(count_switches(&s.machine.trace, None), 0);
    }

    #[test]
    fn call_not_in_can_call_is_denied() {
        let mut s = sim("entry: foo\nfunc foo\n    call func2\n    halt\nend\n");
        assert_eq!(s.run(100).unwrap().outcome, Exit::Violation);
        assert_eq!(s.machine.violations[0].gva, Address(0x9000));
    }

    #[test]
    fn nested_call_back_into_default() {
        let text = "entry: foo
func foo
    mov r12 3
    call func1
    halt
end
func func1
    mov r12 4
    call func3
    ret
end
func func3
    mov rax 9
    ret
end
";
        let mut s = sim(text);
        let before: Vec<Option<u64>> = (0..3)
            .map(|c| s.machine.peek(0, layout::rw_slot(c)))
            .collect();
        assert_eq!(s.run(1000).unwrap().outcome, Exit::Halt);
        assert_eq!(count_switches(&s.machine.trace, None), 4);
        assert_eq!(s.cpu.rax, 9);
        assert_eq!(s.cpu.callee_saved[2], 3);
        assert_eq!(s.machine.peek(0, layout::rw_slot(2)), before[2]);
    }

    #[test]
    fn corrupted_caller_id_traps() {
        let text = "entry: foo
func foo
    call func1
    halt
end
func func1
    write 0x74004ff8 77
    ret
end
";
        let mut s = sim(text);
        assert_eq!(s.machine.stack_top(2), Address(0x7400_5000));
        assert_eq!(s.run(1000).unwrap().outcome, Exit::Violation);
        assert!(s.machine.violations[0].reason.contains("out of range"));
    }

    const LOOP_IN_C2: &str = "entry: foo
func foo
    mov rdi 1
    mov rsi 2
    call func1
    halt
end
func func1
    mov rax 10
    mov rbx 11
    nop
    nop
    mov rdx 12
    ret
end
";

    fn run_with(text: &str, inj: &[Injection]) -> crate::sim::Simulation {
        let mut s = sim(text);
        let injections = inj.to_vec();
        let r = cpu::run(&mut s.machine, &mut s.cpu, 1000, &injections).unwrap();
        assert_eq!(
            r.outcome,
            Exit::Halt,
            "{}",
            crate::trace::render(&s.machine.trace)
        );
        s
    }

    #[test]
    fn interrupt_in_compartment_round_trip() {
        let plain = run_with(LOOP_IN_C2, &[]);
        // Step 6 runs inside func1 (3 setup + call + sentry + first insn).
        for (vector, code) in [(32u8, None), (14u8, Some(2u64))] {
            let s = run_with(
                LOOP_IN_C2,
                &[Injection {
                    after_step: 6,
                    vector,
                    error_code: code,
                }],
            );
            assert_eq!(s.cpu, plain.cpu);
            let extra =
                count_switches(&s.machine.trace, None) - count_switches(&plain.machine.trace, None);
            assert_eq!(extra, 2);
            assert_eq!(count_switches(&s.machine.trace, Some(SwitchKind::Int)), 1);
            assert_eq!(count_switches(&s.machine.trace, Some(SwitchKind::Iret)), 1);
            let delivered = s.machine.trace.iter().find_map(|r| match r.event {
                TraceEvent::InterruptDelivered { ept, .. } => Some(ept),
                _ => None,
            });
            assert_eq!(delivered, Some(2));
        }
    }

    #[test]
    fn interrupt_stack_layout() {
        let mut s = sim(LOOP_IN_C2);
        let inj = [Injection {
            after_step: 6,
            vector: 32,
            error_code: None,
        }];
        loop {
            let before = s.cpu.current_ept;
            cpu::run(&mut s.machine, &mut s.cpu, 1, &[]).unwrap();
            if s.machine.steps == 6 {
                cpu::deliver_interrupt(&mut s.machine, &mut s.cpu, inj[0].vector, None);
            }
            if before == 2 && s.cpu.current_ept == 0 {
                break;
            }
        }
        assert_eq!(s.cpu.rip, layout::default_handler(32));
        let top = layout::INT_STACK_TOP;
        assert_eq!(
            s.machine.peek(0, top.sub(8)),
            s.machine.peek(0, layout::rw_slot(0))
        );
        assert_eq!(s.machine.peek(0, top.sub(16)), Some(2));
        assert_eq!(s.machine.peek(0, top.sub(24)), Some(MAGIC_INT_NOERR));
        assert_eq!(s.cpu.rsp, top.sub(24 + HardwareFrame::SIZE));
        assert_eq!(s.machine.peek(0, s.cpu.rsp.add(24)), Some(top.sub(24).0));
    }

    #[test]
    fn interrupt_in_default_needs_no_switch() {
        let text = "entry: foo\nfunc foo\n    mov rax 1\n    nop\n    nop\n    halt\nend\n";
        let plain = run_with(text, &[]);
        let s = run_with(
            text,
            &[Injection {
                after_step: 2,
                vector: 32,
                error_code: None,
            }],
        );
        assert_eq!(s.cpu, plain.cpu);
        assert_eq!(count_switches(&s.machine.trace, None), 0);
    }

    #[test]
    fn garbage_on_interrupt_stack_is_overwritten() {
        let text = LOOP_IN_C2.replace(
            "    mov rax 10\n",
            "    mov rax 10\n    write 0x70003ff0 99\n    write 0x70003fe8 0x7ffff00d00000001\n",
        );
        let plain = run_with(&text, &[]);
        let s = run_with(
            &text,
            &[Injection {
                after_step: 8,
                vector: 32,
                error_code: None,
            }],
        );
        assert_eq!(s.cpu, plain.cpu);
    }

    #[test]
    fn handler_fixup_redirects_resumption() {
        let text = "entry: foo
func foo
    call func1
    halt
end
func func1
    nop
    nop
    nop
    halt
end
func func2
    mov rax 77
    halt
end
func fixup_isr
    body 40
    write 0x70003fc0 func2
    iretq
end
handler 40 -> fixup_isr
";
        let s = run_with(
            text,
            &[Injection {
                after_step: 4,
                vector: 40,
                error_code: None,
            }],
        );
        assert_eq!(s.cpu.rax, 77);
        assert_eq!(s.cpu.current_ept, 2);
    }

    #[test]
    fn handler_may_call_the_interrupted_compartment() {
        let text = "entry: foo
func foo
    call func1
    halt
end
func func1
    nop
    nop
    nop
    mov rax 3
    ret
end
func isr
    call func1
    iretq
end
handler 40 -> isr
";
        let plain = run_with(text, &[]);
        let s = run_with(
            text,
            &[Injection {
                after_step: 4,
                vector: 40,
                error_code: None,
            }],
        );
        assert!(
            s.machine.violations.is_empty(),
            "{:?}",
            s.machine.violations
        );
        assert_eq!(s.cpu, plain.cpu);
        let extra =
            count_switches(&s.machine.trace, None) - count_switches(&plain.machine.trace, None);
        assert_eq!(extra, 4);
    }
}
