use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use gatesim::attack::{run_attack, AttackKind};
use gatesim::cost::{crossing_table, CostTable, DataPathConfig};
use gatesim::igc::{self, Direction, PollExit, WorkloadSpec};
use gatesim::policy::{check_layout, has_errors, parse_policy, parse_symbols, resolve};
use gatesim::trace::{count_switches, render};
use gatesim::{Exit, MachineConfig, SimError, Simulation};

/// Simulator for EPT-based kernel compartments.
#[derive(Parser)]
#[command(name = "gatesim", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse and resolve a policy against a symbol map and report layout diagnostics.
    Check(PolicyFiles),
    /// Run a scenario on the compartmentalized machine.
    Run(RunArgs),
    /// Run the igc data-path model.
    Igc(IgcArgs),
    /// Run attack demonstrations and compare with their expected outcome.
    Attack(AttackArgs),
}

#[derive(Args)]
struct PolicyFiles {
    #[arg(long)]
    policy: PathBuf,
    #[arg(long)]
    symbols: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Toggle {
    On,
    Off,
}

#[derive(Args)]
struct Output {
    /// Append the event trace, one event per line.
    #[arg(long)]
    trace: bool,
    /// Write the report here instead of standard output.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    files: PolicyFiles,
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long, value_enum, default_value = "on")]
    hlat: Toggle,
    /// Record every successful translation in the trace.
    #[arg(long)]
    trace_accesses: bool,
    #[arg(long, default_value_t = 100_000)]
    fuel: u64,
    #[arg(long)]
    cost_table: Option<PathBuf>,
    #[command(flatten)]
    out: Output,
}

#[derive(Clone, Copy, ValueEnum)]
enum DirectionArg {
    Tx,
    Rx,
}

#[derive(Clone, Copy, ValueEnum)]
enum PollExitArg {
    Auto,
    ShortCircuit,
    Complete,
}

#[derive(Args)]
struct IgcArgs {
    #[arg(long)]
    refined: bool,
    #[arg(long, value_enum, default_value = "tx")]
    direction: DirectionArg,
    #[arg(long, default_value_t = 1)]
    packets: u64,
    #[arg(long, default_value_t = igc::MTU_PAYLOAD)]
    payload: u64,
    #[arg(long, default_value_t = 1)]
    polls: u64,
    #[arg(long, value_enum, default_value = "auto")]
    poll_exit: PollExitArg,
    /// Driver compartments sending round-robin (TX only).
    #[arg(long, default_value_t = 1)]
    senders: usize,
    #[arg(long, default_value_t = 128)]
    tx_cleanup_batch: u64,
    #[arg(long, default_value_t = 64)]
    rx_budget: u64,
    /// Keep interrupts masked while the driver compartment runs.
    #[arg(long)]
    no_driver_interrupts: bool,
    /// Also run the payload and sender sweeps and print ordering verdicts.
    #[arg(long)]
    ordering: bool,
    #[arg(long)]
    cost_table: Option<PathBuf>,
    #[command(flatten)]
    out: Output,
}

#[derive(Args)]
struct AttackArgs {
    /// An attack name, or `all`.
    name: String,
    #[command(flatten)]
    out: Output,
}

/// Outcome of a subcommand: the text to emit and whether every check passed.
struct Outcome {
    report: String,
    ok: bool,
}

enum Failure {
    Input(String),
    Model(String),
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Layout(_) | SimError::ModelMismatch(_) => Failure::Model(e.to_string()),
            _ => Failure::Input(e.to_string()),
        }
    }
}

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path)
        .map_err(|e| Failure::Input(format!("cannot read {}: {e}", path.display())))
}

fn cost_table(path: Option<&Path>) -> Result<CostTable, Failure> {
    match path {
        Some(p) => Ok(CostTable::parse(&read(p)?)?),
        None => Ok(CostTable::default()),
    }
}

fn check(args: &PolicyFiles) -> Result<Outcome, Failure> {
    let policies = parse_policy(&read(&args.policy)?)?;
    let symbols = parse_symbols(&read(&args.symbols)?)?;
    let matrix = resolve(&policies, &symbols)?;
    let diags = check_layout(&matrix, &symbols);
    let mut report = format!("compartments: {}\n", matrix.compartment_count());
    for d in &diags {
        let _ = writeln!(report, "{d}");
    }
    let errors = has_errors(&diags);
    let _ = writeln!(
        report,
        "{}",
        if errors {
            "layout: error"
        } else {
            "layout: ok"
        }
    );
    Ok(Outcome {
        report,
        ok: !errors,
    })
}

fn run(args: &RunArgs) -> Result<Outcome, Failure> {
    let config = MachineConfig {
        hlat_enabled: matches!(args.hlat, Toggle::On),
        trace_accesses: args.trace_accesses,
        ..MachineConfig::default()
    };
    let table = cost_table(args.cost_table.as_deref())?;
    let mut sim = Simulation::from_texts(
        &read(&args.files.policy)?,
        &read(&args.files.symbols)?,
        &read(&args.scenario)?,
        config,
    )?;
    let result = sim.run(args.fuel)?;
    let trace = &sim.machine.trace;
    let switches = count_switches(trace, None) as u64;
    let cpu = &sim.cpu;
    let mut report = String::new();
    let _ = writeln!(report, "outcome: {}", result.outcome.name());
    let _ = writeln!(report, "steps: {}", result.steps);
    let _ = writeln!(report, "switches: {switches}");
    let _ = writeln!(
        report,
        "cycles: {}",
        gatesim::estimate_cycles(switches, &table)
    );
    let _ = writeln!(report, "violations: {}", sim.machine.violations.len());
    for v in &sim.machine.violations {
        let _ = writeln!(report, "  {v}");
    }
    let _ = writeln!(
        report,
        "cpu: ept={} rip={} rsp={} rax={:#x} euid={} if={}",
        cpu.current_ept, cpu.rip, cpu.rsp, cpu.rax, cpu.euid, cpu.rflags_if
    );
    if args.out.trace {
        report.push_str(&render(trace));
    }
    let ok = result.outcome == Exit::Halt && sim.machine.violations.is_empty();
    Ok(Outcome { report, ok })
}

fn igc_cmd(args: &IgcArgs) -> Result<Outcome, Failure> {
    let table = cost_table(args.cost_table.as_deref())?;
    let config = DataPathConfig {
        refined: args.refined,
        tx_cleanup_batch: args.tx_cleanup_batch,
        rx_budget: args.rx_budget,
        interrupts_in_driver: !args.no_driver_interrupts,
    };
    let workload = WorkloadSpec {
        direction: match args.direction {
            DirectionArg::Tx => Direction::Tx,
            DirectionArg::Rx => Direction::Rx,
        },
        packets: args.packets,
        payload_bytes: args.payload,
        polls: args.polls,
        poll_exit: match args.poll_exit {
            PollExitArg::Auto => PollExit::Auto,
            PollExitArg::ShortCircuit => PollExit::ShortCircuit,
            PollExitArg::Complete => PollExit::Complete,
        },
        senders: args.senders,
    };
    let mut report = crossing_table(&config).to_string();
    let r = igc::simulate_datapath(&workload, &config, &table)?;
    let _ = write!(report, "{r}");
    let mut ok = true;
    if args.ordering {
        let (pairs, senders) = igc::ordering_sweep(&config, &table, 64)?;
        report.push_str("verdicts\n");
        for v in igc::overhead_ordering(&pairs, &senders) {
            ok &= v.holds;
            let _ = writeln!(report, "  {v}");
        }
    }
    if args.out.trace {
        report.push_str(&render(&r.trace));
    }
    Ok(Outcome { report, ok })
}

fn attack_cmd(args: &AttackArgs) -> Result<Outcome, Failure> {
    let kinds: Vec<AttackKind> = if args.name == "all" {
        AttackKind::ALL.to_vec()
    } else {
        let kind = AttackKind::from_name(&args.name).ok_or_else(|| {
            let names: Vec<&str> = AttackKind::ALL.iter().map(|k| k.name()).collect();
            Failure::Input(format!(
                "unknown attack `{}` (expected one of: {}, all)",
                args.name,
                names.join(", ")
            ))
        })?;
        vec![kind]
    };
    let mut report = String::new();
    let mut ok = true;
    for kind in kinds {
        let r = run_attack(kind)?;
        ok &= r.as_expected();
        let _ = writeln!(report, "{r}");
        if args.out.trace {
            report.push_str(&render(&r.trace));
        }
    }
    Ok(Outcome { report, ok })
}

fn emit(report: &str, path: Option<&Path>) -> Result<(), Failure> {
    match path {
        Some(p) => fs::write(p, report)
            .map_err(|e| Failure::Input(format!("cannot write {}: {e}", p.display()))),
        None => {
            print!("{report}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (result, report_path) = match &cli.command {
        Command::Check(a) => (check(a), None),
        Command::Run(a) => (run(a), a.out.report.as_deref()),
        Command::Igc(a) => (igc_cmd(a), a.out.report.as_deref()),
        Command::Attack(a) => (attack_cmd(a), a.out.report.as_deref()),
    };
    let result = result.and_then(|o| emit(&o.report, report_path).map(|_| o.ok));
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(Failure::Model(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Input(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
