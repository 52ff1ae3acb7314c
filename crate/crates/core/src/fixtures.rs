//! Shared test policy: the default compartment may call `func1` in
//! compartment 2 as root; compartment 2 may call back into `func3`.

use crate::machine::MachineConfig;
use crate::sim::Simulation;
use crate::trace::TraceEvent;

pub const POLICY: &str = "cmpt_id: 0
can_execute: foo, bar, tramp, ...
can_read: obj2
can_write:
can_call: func1 (cmpt_id=2)
execution_context: euid = any

cmpt_id: 2
can_execute: func1, func2, tramp
can_read: obj1, obj2, obj3
can_write: obj1
can_call: func3
execution_context: euid = root
";

pub const SYMS: &str = "foo 0x1000 64
bar 0x1040 64
func3 0x2000 64
obj1 0x3000 8
obj2 0x4000 8
obj3 0x7ff8 16
func1 0x5000 64
tramp 0x6000 64
func2 0x9000 64
";

pub fn sim(scenario: &str) -> Simulation {
    Simulation::from_texts(POLICY, SYMS, scenario, MachineConfig::default()).unwrap()
}

pub fn events(s: &Simulation) -> Vec<&TraceEvent> {
    s.machine.trace.iter().map(|r| &r.event).collect()
}
