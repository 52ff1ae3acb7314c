//! The igc NIC data path as generated scenarios: a kernel compartment and
//! one or more driver compartments exchange calls along the TX and RX paths,
//! the trace is attributed back to the exported functions, and the counts
//! are checked against the analytic model.

use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as _;

use crate::addr::Address;
use crate::cost::{estimate_cycles, CostTable, DataPathConfig, Rate};
use crate::cpu::{self, Exit, Injection};
use crate::error::{Result, SimError};
use crate::machine::MachineConfig;
use crate::policy::SymbolTable;
use crate::sim::Simulation;
use crate::trace::{SwitchKind, TraceEvent, TraceRecord};

/// Link, IP and UDP header bytes added to every payload on the wire.
pub const HEADER_BYTES: u64 = 42;
/// Wire size above which RX switches to page-fragment mode.
pub const RX_HDR_LEN: u64 = 256;
pub const IRQ_VECTOR: u8 = 40;
pub const PAYLOAD_SWEEP: [u64; 6] = [64, 128, 256, 512, 1024, 1472];
pub const SENDER_SWEEP: [usize; 5] = [2, 4, 8, 16, 32];
pub const MTU_PAYLOAD: u64 = 1472;

const FUEL: u64 = 5_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    Tx,
    Rx,
}

impl Direction {
    pub fn name(self) -> &'static str {
        match self {
            Direction::Tx => "tx",
            Direction::Rx => "rx",
        }
    }

    pub fn from_name(s: &str) -> Option<Direction> {
        match s {
            "tx" => Some(Direction::Tx),
            "rx" => Some(Direction::Rx),
            _ => None,
        }
    }
}

/// Whether `napi_complete_done` crosses back into the kernel at the end of
/// a poll. `Auto` completes on RX polls and short-circuits on TX polls.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PollExit {
    Auto,
    ShortCircuit,
    Complete,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WorkloadSpec {
    pub direction: Direction,
    pub packets: u64,
    pub payload_bytes: u64,
    pub polls: u64,
    pub poll_exit: PollExit,
    /// Driver compartments, one per sending thread. TX only.
    pub senders: usize,
}

impl WorkloadSpec {
    pub fn new(direction: Direction, packets: u64, payload_bytes: u64) -> Self {
        WorkloadSpec {
            direction,
            packets,
            payload_bytes,
            polls: 1,
            poll_exit: PollExit::Auto,
            senders: 1,
        }
    }

    pub fn large(&self) -> bool {
        self.payload_bytes + HEADER_BYTES > RX_HDR_LEN
    }

    pub fn completes(&self) -> bool {
        match self.poll_exit {
            PollExit::Auto => self.direction == Direction::Rx,
            PollExit::ShortCircuit => false,
            PollExit::Complete => true,
        }
    }

    pub fn per_poll(&self) -> u64 {
        self.packets / self.polls
    }

    pub fn validate(&self, config: &DataPathConfig) -> Result<()> {
        let fail = |m: &str| Err(SimError::Workload(m.into()));
        config.validate().map_err(SimError::Workload)?;
        if self.packets == 0 || self.polls == 0 {
            return fail("packets and polls must be at least 1");
        }
        if self.payload_bytes == 0 {
            return fail("payload must be at least one byte");
        }
        if !self.packets.is_multiple_of(self.polls) {
            return fail("packets must divide evenly across polls");
        }
        if self.senders == 0 {
            return fail("at least one sender is required");
        }
        if self.senders > 1 && self.direction == Direction::Rx {
            return fail("multiple senders apply to TX only");
        }
        if self.direction == Direction::Rx && self.per_poll() > config.rx_budget {
            return fail("packets per poll exceed the RX budget");
        }
        Ok(())
    }
}

impl fmt::Display for WorkloadSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} packets={} payload={}B polls={} poll-exit={}",
            self.direction.name(),
            self.packets,
            self.payload_bytes,
            self.polls,
            if self.completes() {
                "complete"
            } else {
                "short-circuit"
            }
        )?;
        if self.senders > 1 {
            write!(f, " senders={}", self.senders)?;
        }
        Ok(())
    }
}

/// Switch counts by the data-path role of the crossed function.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PathCounts {
    pub isr: u64,
    pub tx_submission: u64,
    pub tx_cleanup: u64,
    pub rx: u64,
    pub poll_entry: u64,
    pub poll_exit: u64,
    pub interrupt_delivery: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Role {
    Isr,
    TxSubmission,
    TxCleanup,
    Rx,
    PollEntry,
    PollExit,
    Delivery,
}

impl PathCounts {
    const NAMES: [&'static str; 7] = [
        "isr",
        "tx_submission",
        "tx_cleanup",
        "rx",
        "poll_entry",
        "poll_exit",
        "interrupt_delivery",
    ];

    fn slot(&mut self, role: Role) -> &mut u64 {
        match role {
            Role::Isr => &mut self.isr,
            Role::TxSubmission => &mut self.tx_submission,
            Role::TxCleanup => &mut self.tx_cleanup,
            Role::Rx => &mut self.rx,
            Role::PollEntry => &mut self.poll_entry,
            Role::PollExit => &mut self.poll_exit,
            Role::Delivery => &mut self.interrupt_delivery,
        }
    }

    fn values(&self) -> [u64; 7] {
        [
            self.isr,
            self.tx_submission,
            self.tx_cleanup,
            self.rx,
            self.poll_entry,
            self.poll_exit,
            self.interrupt_delivery,
        ]
    }

    pub fn total(&self) -> u64 {
        self.values().iter().sum()
    }

    pub fn named(&self) -> impl Iterator<Item = (&'static str, u64)> {
        Self::NAMES.into_iter().zip(self.values())
    }
}

const DRIVER_ENTRIES: [(&str, Role); 4] = [
    ("igc_msix_ring", Role::Isr),
    ("igc_features_check", Role::TxSubmission),
    ("igc_xmit_frame", Role::TxSubmission),
    ("igc_poll", Role::PollEntry),
];

const KERNEL_EXPORTS: [(&str, Role); 16] = [
    ("napi_schedule_prep", Role::Isr),
    ("__napi_schedule", Role::Isr),
    ("dma_map_page_attrs", Role::TxSubmission),
    ("dma_unmap_page_attrs", Role::TxCleanup),
    ("napi_consume_skb", Role::TxCleanup),
    ("__memcpy", Role::Rx),
    ("napi_alloc_skb", Role::Rx),
    ("eth_get_headlen", Role::Rx),
    ("skb_add_rx_frag", Role::Rx),
    ("eth_type_trans", Role::Rx),
    ("gro_receive_skb", Role::Rx),
    ("napi_complete_done", Role::PollExit),
    ("skb_batch_consume", Role::TxCleanup),
    ("skb_batch_alloc", Role::Rx),
    ("skb_batch_free", Role::Rx),
    ("gro_batch_deliver", Role::Rx),
];

fn role_of(name: &str) -> Option<Role> {
    DRIVER_ENTRIES
        .iter()
        .chain(KERNEL_EXPORTS.iter())
        .find(|(n, _)| *n == name)
        .map(|&(_, r)| r)
}

/// Switches the model predicts for `w`.
pub fn analytic_counts(w: &WorkloadSpec, config: &DataPathConfig) -> PathCounts {
    let polls = w.polls;
    let chunk = w.per_poll();
    let refined = config.refined;
    let mut c = PathCounts {
        isr: polls * if refined { 0 } else { 6 },
        poll_entry: 2 * polls,
        poll_exit: if w.completes() { 2 * polls } else { 0 },
        ..PathCounts::default()
    };
    if config.interrupts_in_driver {
        let in_driver = match w.direction {
            Direction::Tx => polls,
            Direction::Rx => polls - 1,
        };
        c.interrupt_delivery = 2 * in_driver;
    }
    match w.direction {
        Direction::Tx => {
            c.tx_submission = w.packets * if refined { 2 } else { 6 };
            c.tx_cleanup = polls
                * if refined {
                    2 * chunk.div_ceil(config.tx_cleanup_batch)
                } else {
                    4 * chunk
                };
        }
        Direction::Rx => {
            let per_poll = if refined {
                4 + if chunk < config.rx_budget { 2 } else { 0 }
            } else {
                chunk * if w.large() { 12 } else { 8 }
            };
            c.rx = polls * per_poll;
        }
    }
    c
}

fn func(out: &mut String, name: &str, body: &[String]) {
    let _ = writeln!(out, "func {name}");
    for line in body {
        let _ = writeln!(out, "    {line}");
    }
    out.push_str("end\n");
}

fn calls(names: &[&str]) -> Vec<String> {
    names.iter().map(|n| format!("call {n}")).collect()
}

fn policy_text(w: &WorkloadSpec, config: &DataPathConfig) -> String {
    let mut out = String::from("cmpt_id: 0\ncan_execute: kernel_main\ncan_call: ");
    let entries: Vec<String> = (1..=w.senders)
        .flat_map(|k| {
            DRIVER_ENTRIES
                .iter()
                .map(move |(n, _)| format!("{n} (cmpt_id={k})"))
        })
        .collect();
    out.push_str(&entries.join(", "));
    out.push_str("\nexecution_context: euid = any\n");
    let exports: Vec<&str> = KERNEL_EXPORTS.iter().map(|(n, _)| *n).collect();
    let drv_fns: Vec<&str> = DRIVER_ENTRIES.iter().map(|(n, _)| *n).collect();
    for k in 1..=w.senders {
        let ctx = if w.senders == 1 {
            "any".to_string()
        } else {
            k.to_string()
        };
        let writes = if config.refined {
            "drv_ring"
        } else {
            "drv_ring, itr"
        };
        let _ = write!(
            out,
            "\ncmpt_id: {k}\ncan_execute: {}\ncan_read: drv_ring\ncan_write: {writes}\ncan_call: {}\nexecution_context: euid = {ctx}\n",
            drv_fns.join(", "),
            exports.join(", ")
        );
    }
    out
}

/// Index of the marker instruction inside `igc_xmit_frame` and `igc_poll`.
struct Markers {
    xmit: usize,
    poll: usize,
}

fn scenario_text(w: &WorkloadSpec, config: &DataPathConfig) -> (String, Markers) {
    let refined = config.refined;
    let chunk = w.per_poll();
    let mut out =
        String::from("entry: kernel_main\nobject drv_ring size 4096\nobject itr size 8\n");

    let mut main = Vec::new();
    let mut sent = 0u64;
    for _ in 0..w.polls {
        match w.direction {
            Direction::Tx => {
                for _ in 0..chunk {
                    if w.senders > 1 {
                        main.push(format!("seteuid {}", sent % w.senders as u64 + 1));
                    }
                    let check = if refined {
                        "igc_features_check_stub"
                    } else {
                        "igc_features_check"
                    };
                    main.extend(calls(&[check, "igc_xmit_frame"]));
                    sent += 1;
                }
                if w.senders > 1 {
                    main.push("seteuid 1".into());
                }
            }
            Direction::Rx => main.push("nop".into()),
        }
        main.push("call igc_poll".into());
    }
    main.push("halt".into());
    func(&mut out, "kernel_main", &main);

    let isr = if refined {
        vec![
            "body 40".into(),
            "write itr 1".into(),
            "call __napi_schedule".into(),
            "iretq".into(),
        ]
    } else {
        vec![
            "body 40".into(),
            "call igc_msix_ring".into(),
            "iretq".into(),
        ]
    };
    func(&mut out, "igc_irq", &isr);
    let _ = writeln!(out, "handler {IRQ_VECTOR} -> igc_irq");
    func(
        &mut out,
        "igc_features_check_stub",
        &["nop".into(), "ret".into()],
    );

    let mut ring = vec!["write itr 1".into()];
    ring.extend(calls(&["napi_schedule_prep", "__napi_schedule"]));
    ring.push("ret".into());
    func(&mut out, "igc_msix_ring", &ring);
    func(
        &mut out,
        "igc_features_check",
        &["read drv_ring".into(), "ret".into()],
    );

    let mut xmit = Vec::new();
    if !refined {
        xmit.push("call dma_map_page_attrs".into());
    }
    xmit.extend(["write drv_ring 1".to_string(), "nop".into(), "ret".into()]);
    let markers = Markers {
        xmit: xmit.len() - 2,
        poll: 0,
    };
    func(&mut out, "igc_xmit_frame", &xmit);

    let mut poll = vec!["nop".to_string()];
    match (w.direction, refined) {
        (Direction::Tx, false) => {
            for _ in 0..chunk {
                poll.extend(calls(&["dma_unmap_page_attrs", "napi_consume_skb"]));
            }
        }
        (Direction::Tx, true) => {
            for i in 0..chunk {
                poll.push("read drv_ring".into());
                if (i + 1) % config.tx_cleanup_batch == 0 || i + 1 == chunk {
                    poll.push("call skb_batch_consume".into());
                }
            }
        }
        (Direction::Rx, false) => {
            for _ in 0..chunk {
                if w.large() {
                    poll.extend(calls(&[
                        "eth_get_headlen",
                        "napi_alloc_skb",
                        "__memcpy",
                        "skb_add_rx_frag",
                        "eth_type_trans",
                        "gro_receive_skb",
                    ]));
                } else {
                    poll.extend(calls(&[
                        "napi_alloc_skb",
                        "__memcpy",
                        "eth_type_trans",
                        "gro_receive_skb",
                    ]));
                }
            }
        }
        (Direction::Rx, true) => {
            poll.push("call skb_batch_alloc".into());
            for _ in 0..chunk {
                poll.push("read drv_ring".into());
            }
            if chunk < config.rx_budget {
                poll.push("call skb_batch_free".into());
            }
            poll.push("call gro_batch_deliver".into());
        }
    }
    if w.completes() {
        poll.push("call napi_complete_done".into());
    }
    poll.push("ret".into());
    func(&mut out, "igc_poll", &poll);

    for (name, _) in KERNEL_EXPORTS {
        func(&mut out, name, &["nop".into(), "ret".into()]);
    }
    (out, markers)
}

fn nth_retire(trace: &[TraceRecord], rip: Address, n: u64) -> Option<u64> {
    trace
        .iter()
        .filter(|r| matches!(r.event, TraceEvent::Retired { rip: at, .. } if at == rip))
        .nth(n as usize)
        .map(|r| r.step)
}

/// One NIC interrupt per poll. TX interrupts arrive right after the last
/// submission of the round; RX interrupts arrive inside the previous poll,
/// the first one before the kernel starts.
fn place_interrupts(
    sim: &Simulation,
    w: &WorkloadSpec,
    markers: &Markers,
) -> Result<Vec<Injection>> {
    let addr_of = |name: &str| {
        sim.scenario
            .symbols
            .get(name)
            .map(|s| s.gva)
            .expect("generated function")
    };
    let (marker, occurrence): (Address, Box<dyn Fn(u64) -> Option<u64>>) = match w.direction {
        Direction::Tx => (addr_of("igc_xmit_frame").add(8 * markers.xmit as u64), {
            let chunk = w.per_poll();
            Box::new(move |r| Some((r + 1) * chunk - 1))
        }),
        Direction::Rx => (
            addr_of("igc_poll").add(8 * markers.poll as u64),
            Box::new(|r| r.checked_sub(1)),
        ),
    };
    let mut injections = Vec::new();
    for round in 0..w.polls {
        let after_step = match occurrence(round) {
            None => 0,
            Some(n) => {
                let mut probe = sim.clone();
                cpu::run(&mut probe.machine, &mut probe.cpu, FUEL, &injections)?;
                nth_retire(&probe.machine.trace, marker, n).ok_or_else(|| {
                    SimError::ModelMismatch(format!("interrupt point {n} never reached"))
                })?
            }
        };
        injections.push(Injection {
            after_step,
            vector: IRQ_VECTOR,
            error_code: None,
        });
    }
    Ok(injections)
}

/// Attribute every switch in `trace` to the data-path role of the function
/// it enters or leaves.
pub fn count_by_role(trace: &[TraceRecord], symbols: &SymbolTable) -> Result<PathCounts> {
    let by_addr: BTreeMap<Address, &str> =
        symbols.iter().map(|s| (s.gva, s.name.as_str())).collect();
    let mismatch = |m: String| SimError::ModelMismatch(m);
    let mut counts = PathCounts::default();
    let mut shadow: Vec<Role> = Vec::new();
    for rec in trace {
        let TraceEvent::Switch { kind, target, .. } = rec.event else {
            continue;
        };
        let role = match kind {
            SwitchKind::Call => {
                let name = by_addr
                    .get(&target)
                    .ok_or_else(|| mismatch(format!("call into unknown address {target}")))?;
                let role = role_of(name)
                    .ok_or_else(|| mismatch(format!("call into non-exported `{name}`")))?;
                shadow.push(role);
                role
            }
            SwitchKind::Ret => shadow
                .pop()
                .ok_or_else(|| mismatch(format!("unmatched return at step {}", rec.step)))?,
            SwitchKind::Int | SwitchKind::Iret => Role::Delivery,
            SwitchKind::Vmfunc => {
                return Err(mismatch(format!("bare vmfunc at step {}", rec.step)))
            }
        };
        *counts.slot(role) += 1;
    }
    if !shadow.is_empty() {
        return Err(mismatch(format!("{} calls never returned", shadow.len())));
    }
    Ok(counts)
}

#[derive(Debug, Clone)]
pub struct Report {
    pub workload: WorkloadSpec,
    pub config: DataPathConfig,
    pub measured: PathCounts,
    pub analytic: PathCounts,
    pub interrupts: u64,
    pub cycles: u64,
    pub trace: Vec<TraceRecord>,
}

impl Report {
    pub fn total_switches(&self) -> u64 {
        self.measured.total()
    }

    pub fn difference(&self) -> i64 {
        self.measured.total() as i64 - self.analytic.total() as i64
    }

    fn packets(&self) -> u64 {
        self.workload.packets
    }

    pub fn isr_per_interrupt(&self) -> Rate {
        Rate::new(self.measured.isr, self.interrupts)
    }

    pub fn tx_submission_per_packet(&self) -> Rate {
        Rate::new(self.measured.tx_submission, self.packets())
    }

    pub fn tx_cleanup_per_packet(&self) -> Rate {
        Rate::new(self.measured.tx_cleanup, self.packets())
    }

    /// Baseline RX counts the poll-exit crossing with the packets; refined RX
    /// counts only the batch helpers.
    pub fn rx_per_packet(&self) -> Rate {
        let exit = if self.config.refined {
            0
        } else {
            self.measured.poll_exit
        };
        Rate::new(self.measured.rx + exit, self.packets())
    }

    pub fn poll_per_poll(&self) -> Rate {
        Rate::new(
            self.measured.poll_entry + self.measured.poll_exit,
            self.workload.polls,
        )
    }

    pub fn switches_per_packet(&self) -> Rate {
        Rate::new(self.total_switches(), self.packets())
    }

    pub fn cycles_per_packet(&self) -> f64 {
        self.cycles as f64 / self.packets() as f64
    }

    /// Crossing cycles per payload byte.
    pub fn overhead_per_byte(&self) -> f64 {
        self.cycles_per_packet() / self.workload.payload_bytes as f64
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let cfg = &self.config;
        writeln!(f, "workload: {}", self.workload)?;
        writeln!(
            f,
            "config: {} tx_cleanup_batch={} rx_budget={} interrupts_in_driver={}",
            if cfg.refined { "refined" } else { "baseline" },
            cfg.tx_cleanup_batch,
            cfg.rx_budget,
            cfg.interrupts_in_driver
        )?;
        writeln!(f, "{:<20} {:>10} {:>10}", "path", "trace", "model")?;
        for ((name, measured), (_, model)) in self.measured.named().zip(self.analytic.named()) {
            writeln!(f, "{name:<20} {measured:>10} {model:>10}")?;
        }
        writeln!(
            f,
            "{:<20} {:>10} {:>10}",
            "total",
            self.measured.total(),
            self.analytic.total()
        )?;
        writeln!(f, "difference: {}", self.difference())?;
        writeln!(f, "interrupts: {}", self.interrupts)?;
        match self.workload.direction {
            Direction::Tx => {
                writeln!(
                    f,
                    "tx_submission_per_packet: {}",
                    self.tx_submission_per_packet()
                )?;
                writeln!(f, "tx_cleanup_per_packet: {}", self.tx_cleanup_per_packet())?;
            }
            Direction::Rx => writeln!(f, "rx_per_packet: {}", self.rx_per_packet())?,
        }
        writeln!(f, "isr_per_interrupt: {}", self.isr_per_interrupt())?;
        writeln!(f, "poll_per_poll: {}", self.poll_per_poll())?;
        writeln!(f, "switches_per_packet: {}", self.switches_per_packet())?;
        writeln!(f, "cycles: {}", self.cycles)?;
        writeln!(f, "cycles_per_packet: {:.2}", self.cycles_per_packet())
    }
}

/// Run `w` on a generated scenario and reconcile the trace with the model.
pub fn simulate_datapath(
    w: &WorkloadSpec,
    config: &DataPathConfig,
    table: &CostTable,
) -> Result<Report> {
    w.validate(config)?;
    let (text, markers) = scenario_text(w, config);
    let policies = crate::policy::parse_policy(&policy_text(w, config))?;
    let mut sim = Simulation::build(
        &policies,
        &SymbolTable::new(),
        &text,
        MachineConfig::default(),
    )?;
    if !config.interrupts_in_driver {
        sim.machine.irq_enabled[1..]
            .iter_mut()
            .for_each(|e| *e = false);
    }
    let injections = place_interrupts(&sim, w, &markers)?;
    let result = cpu::run(&mut sim.machine, &mut sim.cpu, FUEL, &injections)?;
    if result.outcome != Exit::Halt || !sim.machine.violations.is_empty() {
        let why = sim
            .machine
            .violations
            .first()
            .map(|v| format!(": {v}"))
            .unwrap_or_default();
        return Err(SimError::ModelMismatch(format!(
            "data path run ended with {}{why}",
            result.outcome.name()
        )));
    }
    let trace = sim.machine.take_trace();
    let interrupts = trace
        .iter()
        .filter(|r| matches!(r.event, TraceEvent::InterruptDelivered { .. }))
        .count() as u64;
    let measured = count_by_role(&trace, &sim.scenario.symbols)?;
    let analytic = analytic_counts(w, config);
    if measured != analytic {
        let diffs: Vec<String> = measured
            .named()
            .zip(analytic.named())
            .filter(|((_, a), (_, b))| a != b)
            .map(|((name, a), (_, b))| format!("{name}: trace {a} vs model {b}"))
            .collect();
        return Err(SimError::ModelMismatch(diffs.join("; ")));
    }
    if interrupts != w.polls {
        return Err(SimError::ModelMismatch(format!(
            "{interrupts} interrupts delivered, expected {}",
            w.polls
        )));
    }
    let cycles = estimate_cycles(measured.total(), table);
    Ok(Report {
        workload: *w,
        config: *config,
        measured,
        analytic,
        interrupts,
        cycles,
        trace,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Verdict {
    pub name: &'static str,
    pub holds: bool,
    pub detail: String,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}] {}: {}",
            if self.holds { "true" } else { "false" },
            self.name,
            self.detail
        )
    }
}

/// Baseline and refined runs of one workload.
#[derive(Debug, Clone)]
pub struct Comparison {
    pub baseline: Report,
    pub refined: Report,
}

pub fn compare(w: &WorkloadSpec, base: &DataPathConfig, table: &CostTable) -> Result<Comparison> {
    let baseline = simulate_datapath(
        w,
        &DataPathConfig {
            refined: false,
            ..*base
        },
        table,
    )?;
    let refined = simulate_datapath(
        w,
        &DataPathConfig {
            refined: true,
            ..*base
        },
        table,
    )?;
    Ok(Comparison { baseline, refined })
}

/// Ordering checks that stand in for throughput figures: refinement never
/// costs more, per-byte overhead does not grow with payload, the cycle
/// ratio agrees with the crossing ratio, and crossings do not depend on the
/// number of sending compartments.
pub fn overhead_ordering(pairs: &[Comparison], senders: &[Report]) -> Vec<Verdict> {
    let mut verdicts = Vec::new();

    let mut detail = Vec::new();
    let mut holds = !pairs.is_empty();
    for p in pairs {
        let ok = p.refined.cycles <= p.baseline.cycles && p.refined.workload == p.baseline.workload;
        holds &= ok;
        detail.push(format!(
            "{} {}B {}<={}",
            p.baseline.workload.direction.name(),
            p.baseline.workload.payload_bytes,
            p.refined.cycles,
            p.baseline.cycles
        ));
    }
    verdicts.push(Verdict {
        name: "refined cycles <= baseline cycles",
        holds,
        detail: detail.join(", "),
    });

    let mut detail = Vec::new();
    let mut holds = !pairs.is_empty();
    for dir in [Direction::Tx, Direction::Rx] {
        for refined in [false, true] {
            let mut points: Vec<(u64, f64)> = pairs
                .iter()
                .map(|p| if refined { &p.refined } else { &p.baseline })
                .filter(|r| r.workload.direction == dir)
                .map(|r| (r.workload.payload_bytes, r.overhead_per_byte()))
                .collect();
            if points.is_empty() {
                continue;
            }
            points.sort_by_key(|&(payload, _)| payload);
            let ok = points.windows(2).all(|w| w[1].1 <= w[0].1);
            holds &= ok;
            let series: Vec<String> = points.iter().map(|(p, v)| format!("{p}:{v:.2}")).collect();
            detail.push(format!(
                "{} {} [{}]",
                dir.name(),
                if refined { "refined" } else { "baseline" },
                series.join(" ")
            ));
        }
    }
    verdicts.push(Verdict {
        name: "overhead per byte non-increasing in payload",
        holds,
        detail: detail.join("; "),
    });

    let smallest_tx = pairs
        .iter()
        .filter(|p| p.baseline.workload.direction == Direction::Tx)
        .min_by_key(|p| p.baseline.workload.payload_bytes);
    verdicts.push(match smallest_tx {
        Some(p) => {
            let per_packet = |r: &Report| (r.measured.tx_submission + r.measured.tx_cleanup) as f64 / r.packets() as f64;
            let crossing_ratio = per_packet(&p.baseline) / per_packet(&p.refined);
            let cycle_ratio = p.baseline.cycles_per_packet() / p.refined.cycles_per_packet();
            Verdict {
                name: "small-packet TX cycle ratio follows crossing ratio",
                holds: (cycle_ratio > 10.0) == (crossing_ratio > 10.0),
                detail: format!(
                    "{}B crossings {:.4} vs {:.4} per packet (ratio {crossing_ratio:.2}), cycles ratio {cycle_ratio:.2}",
                    p.baseline.workload.payload_bytes,
                    per_packet(&p.baseline),
                    per_packet(&p.refined)
                ),
            }
        }
        None => Verdict {
            name: "small-packet TX cycle ratio follows crossing ratio",
            holds: false,
            detail: "no TX workload".into(),
        },
    });

    let rates: Vec<(usize, Rate)> = senders
        .iter()
        .map(|r| (r.workload.senders, r.switches_per_packet()))
        .collect();
    let holds = rates.len() >= 2 && rates.windows(2).all(|w| w[0].1.value() == w[1].1.value());
    let detail: Vec<String> = rates.iter().map(|(n, r)| format!("N={n}: {r}")).collect();
    verdicts.push(Verdict {
        name: "per-packet crossings independent of sender count",
        holds,
        detail: detail.join(", "),
    });
    verdicts
}

/// The standard sweep: both directions over [`PAYLOAD_SWEEP`] and refined
/// MTU-sized TX over [`SENDER_SWEEP`].
pub fn ordering_sweep(
    base: &DataPathConfig,
    table: &CostTable,
    packets: u64,
) -> Result<(Vec<Comparison>, Vec<Report>)> {
    let mut pairs = Vec::new();
    for dir in [Direction::Tx, Direction::Rx] {
        for payload in PAYLOAD_SWEEP {
            pairs.push(compare(
                &WorkloadSpec::new(dir, packets, payload),
                base,
                table,
            )?);
        }
    }
    let mut senders = Vec::new();
    for n in SENDER_SWEEP {
        let w = WorkloadSpec {
            senders: n,
            ..WorkloadSpec::new(Direction::Tx, packets, MTU_PAYLOAD)
        };
        senders.push(simulate_datapath(
            &w,
            &DataPathConfig {
                refined: true,
                ..*base
            },
            table,
        )?);
    }
    Ok((pairs, senders))
}
