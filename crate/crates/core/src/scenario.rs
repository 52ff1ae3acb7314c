//! Scenario files: memory objects, functions written in the micro-ISA,
//! handler overrides and interrupt injections.
//!
//! ```text
//! entry: main
//! start_cmpt: 0
//! euid: 0
//! irq_disabled: 2
//!
//! object counter @ 0x3000 size 8 = 0
//! func main
//!     mov rdi 7
//!     call func1
//!     halt
//! end
//! handler 32 -> my_isr
//! interrupt after 3 vector 32
//! interrupt after 9 vector 14 error 0x2
//! ```
//!
//! Operands are numbers (decimal or `0x` hex), symbol names or
//! `symbol+offset`. Objects and functions without `@ addr` take the address
//! from the symbol map, or else get fresh pages from [`AUTO_BASE`].

use crate::addr::{Address, PAGE_SIZE};
use crate::cpu::{CpuState, Injection, Instruction, Reg, INSN_SIZE};
use crate::error::{parse_err, InputKind, Result, SimError};
use crate::gate;
use crate::machine::Machine;
use crate::policy::{parse_u64, Symbol, SymbolTable};

/// First address used for scenario symbols without a fixed address.
pub const AUTO_BASE: u64 = 0x0100_0000;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Object {
    pub name: String,
    pub gva: Address,
    pub size: u64,
    pub init: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Function {
    pub name: String,
    pub gva: Address,
    pub body: Vec<Instruction>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scenario {
    pub entry: String,
    pub start_cmpt: usize,
    pub euid: u64,
    pub irq_disabled: Vec<usize>,
    pub objects: Vec<Object>,
    pub functions: Vec<Function>,
    pub handlers: Vec<(u8, String)>,
    pub interrupts: Vec<Injection>,
    /// The symbol map merged with every scenario symbol.
    pub symbols: SymbolTable,
}

fn err(line: usize, msg: impl Into<String>) -> SimError {
    parse_err(InputKind::Scenario, line, msg)
}

fn num(tok: &str, line: usize) -> Result<u64> {
    parse_u64(tok).ok_or_else(|| err(line, format!("bad number `{tok}`")))
}

struct RawFunc {
    name: String,
    at: Option<u64>,
    line: usize,
    body: Vec<(usize, Vec<String>)>,
}

struct RawObject {
    name: String,
    at: Option<u64>,
    size: u64,
    init: Vec<String>,
    line: usize,
}

/// `name [@ addr] rest...` → (name, addr, rest)
fn split_at_clause<'a>(
    toks: &'a [&'a str],
    line: usize,
) -> Result<(&'a str, Option<u64>, &'a [&'a str])> {
    let name = *toks.first().ok_or_else(|| err(line, "missing name"))?;
    if toks.get(1) == Some(&"@") {
        let addr = toks
            .get(2)
            .ok_or_else(|| err(line, "missing address after `@`"))?;
        Ok((name, Some(num(addr, line)?), &toks[3..]))
    } else {
        Ok((name, None, &toks[1..]))
    }
}

pub fn parse_scenario(text: &str, base: &SymbolTable) -> Result<Scenario> {
    let mut entry = None;
    let mut start_cmpt = 0;
    let mut euid = 0;
    let mut irq_disabled = Vec::new();
    let mut objects: Vec<RawObject> = Vec::new();
    let mut funcs: Vec<RawFunc> = Vec::new();
    let mut handlers_raw: Vec<(u8, String, usize)> = Vec::new();
    let mut interrupts = Vec::new();
    let mut open: Option<RawFunc> = None;

    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let toks: Vec<&str> = content.split_whitespace().collect();

        if let Some(f) = open.as_mut() {
            if toks == ["end"] {
                funcs.push(open.take().unwrap());
            } else {
                f.body
                    .push((line, toks.iter().map(|s| s.to_string()).collect()));
            }
            continue;
        }

        if let Some((key, value)) = content.split_once(':') {
            let value = value.trim();
            match key.trim() {
                "entry" => entry = Some(value.to_string()),
                "start_cmpt" => start_cmpt = num(value, line)? as usize,
                "euid" => euid = num(value, line)?,
                "irq_disabled" => {
                    for item in value.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                        irq_disabled.push(num(item, line)? as usize);
                    }
                }
                other => return Err(err(line, format!("unknown key `{other}`"))),
            }
            continue;
        }

        match toks[0] {
            "object" => {
                let (name, at, rest) = split_at_clause(&toks[1..], line)?;
                let (size, init) = match rest {
                    ["size", n, tail @ ..] => (num(n, line)?, tail),
                    _ => {
                        return Err(err(
                            line,
                            "expected `object name [@ addr] size N [= words]`",
                        ))
                    }
                };
                let init: Vec<String> = match init {
                    [] => Vec::new(),
                    ["=", words @ ..] => words
                        .join(" ")
                        .split(',')
                        .map(|w| w.trim().to_string())
                        .filter(|w| !w.is_empty())
                        .collect(),
                    _ => return Err(err(line, "expected `= w1, w2, ...` after the size")),
                };
                if size == 0 {
                    return Err(err(line, "object size must be at least 1"));
                }
                if init.len() as u64 * 8 > size.div_ceil(8) * 8 {
                    return Err(err(line, "more initial words than the object holds"));
                }
                objects.push(RawObject {
                    name: name.to_string(),
                    at,
                    size,
                    init,
                    line,
                });
            }
            "func" => {
                let (name, at, rest) = split_at_clause(&toks[1..], line)?;
                if !rest.is_empty() {
                    return Err(err(line, "unexpected tokens after function name"));
                }
                open = Some(RawFunc {
                    name: name.to_string(),
                    at,
                    line,
                    body: Vec::new(),
                });
            }
            "handler" => match &toks[1..] {
                [v, "->", f] => {
                    let v = u8::try_from(num(v, line)?)
                        .map_err(|_| err(line, "vector out of range"))?;
                    handlers_raw.push((v, f.to_string(), line));
                }
                _ => return Err(err(line, "expected `handler V -> func`")),
            },
            "interrupt" => {
                let (after, vector, code) = match &toks[1..] {
                    ["after", n, "vector", v] => (n, v, None),
                    ["after", n, "vector", v, "error", c] => (n, v, Some(num(c, line)?)),
                    _ => {
                        return Err(err(
                            line,
                            "expected `interrupt after N vector V [error CODE]`",
                        ))
                    }
                };
                let vector = u8::try_from(num(vector, line)?)
                    .map_err(|_| err(line, "vector out of range"))?;
                let inj = Injection {
                    after_step: num(after, line)?,
                    vector,
                    error_code: code,
                };
                crate::cpu::validate_injection(&inj).map_err(|e| err(line, e.to_string()))?;
                interrupts.push(inj);
            }
            other => return Err(err(line, format!("unknown directive `{other}`"))),
        }
    }
    if let Some(f) = open {
        return Err(err(f.line, format!("function `{}` has no `end`", f.name)));
    }

    // Place symbols.
    let mut symbols = base.clone();
    let mut next_auto = AUTO_BASE;
    let mut place = |symbols: &mut SymbolTable,
                     name: &str,
                     at: Option<u64>,
                     size: u64,
                     line: usize|
     -> Result<Address> {
        let gva = match (at, base.get(name)) {
            (Some(a), Some(s)) if s.gva.0 != a => {
                return Err(err(
                    line,
                    format!("`{name}` is at {} in the symbol map", s.gva),
                ));
            }
            (Some(a), _) => a,
            (None, Some(s)) => s.gva.0,
            (None, None) => {
                let a = next_auto;
                next_auto += size.div_ceil(PAGE_SIZE).max(1) * PAGE_SIZE;
                a
            }
        };
        if gva % 8 != 0 {
            return Err(err(line, format!("`{name}` is not 8-byte aligned")));
        }
        match symbols.get(name) {
            Some(s) if s.gva.0 != gva || s.size < size => {
                return Err(err(
                    line,
                    format!("`{name}` conflicts with the symbol map entry"),
                ))
            }
            Some(_) => {}
            None => {
                if !symbols.insert(Symbol::new(name, gva, size)) {
                    return Err(err(line, format!("duplicate symbol `{name}`")));
                }
            }
        }
        Ok(Address(gva))
    };

    let mut placed_objects = Vec::new();
    for o in &objects {
        let gva = place(&mut symbols, &o.name, o.at, o.size, o.line)?;
        placed_objects.push(gva);
    }
    let mut placed_funcs = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for f in &funcs {
        if !seen.insert(f.name.clone()) || objects.iter().any(|o| o.name == f.name) {
            return Err(err(f.line, format!("duplicate symbol `{}`", f.name)));
        }
        let size = (f.body.len().max(1) as u64) * INSN_SIZE;
        placed_funcs.push(place(&mut symbols, &f.name, f.at, size, f.line)?);
    }

    let operand = |tok: &str, line: usize| -> Result<u64> {
        if let Some(v) = parse_u64(tok) {
            return Ok(v);
        }
        let (name, off) = match tok.split_once('+') {
            Some((n, o)) => (n, num(o, line)?),
            None => (tok, 0),
        };
        symbols
            .get(name)
            .map(|s| s.gva.0 + off)
            .ok_or_else(|| err(line, format!("unknown symbol `{name}`")))
    };

    let mut out_objects = Vec::new();
    for (o, gva) in objects.iter().zip(placed_objects) {
        let init = o
            .init
            .iter()
            .map(|w| operand(w, o.line))
            .collect::<Result<_>>()?;
        out_objects.push(Object {
            name: o.name.clone(),
            gva,
            size: o.size,
            init,
        });
    }
    let mut out_funcs = Vec::new();
    for (f, gva) in funcs.iter().zip(placed_funcs) {
        let mut body = Vec::new();
        for (line, toks) in &f.body {
            body.push(parse_insn(toks, *line, &operand)?);
        }
        out_funcs.push(Function {
            name: f.name.clone(),
            gva,
            body,
        });
    }

    let mut handlers = Vec::new();
    for (v, f, line) in handlers_raw {
        if !out_funcs.iter().any(|x| x.name == f) && symbols.get(&f).is_none() {
            return Err(err(line, format!("unknown handler function `{f}`")));
        }
        handlers.push((v, f));
    }

    let entry = entry.ok_or_else(|| err(0, "missing `entry:`"))?;
    if symbols.get(&entry).is_none() {
        return Err(SimError::Scenario(format!(
            "entry `{entry}` is not defined"
        )));
    }
    Ok(Scenario {
        entry,
        start_cmpt,
        euid,
        irq_disabled,
        objects: out_objects,
        functions: out_funcs,
        handlers,
        interrupts,
        symbols,
    })
}

fn parse_insn(
    toks: &[String],
    line: usize,
    operand: &dyn Fn(&str, usize) -> Result<u64>,
) -> Result<Instruction> {
    let t: Vec<&str> = toks.iter().map(String::as_str).collect();
    let addr = |s: &str| operand(s, line).map(Address);
    Ok(match t.as_slice() {
        ["nop"] => Instruction::Nop,
        ["ret"] => Instruction::Ret,
        ["vmcall"] => Instruction::Vmcall,
        ["iretq"] => Instruction::Iretq,
        ["halt"] => Instruction::Halt,
        ["drop"] => Instruction::DropWord,
        ["call", a] => Instruction::Call(addr(a)?),
        ["read", a] => Instruction::Read(addr(a)?),
        ["write", a, v] => Instruction::Write(addr(a)?, operand(v, line)?),
        ["vmfunc", n] => Instruction::Vmfunc(num(n, line)?),
        ["seteuid", n] => Instruction::SetEuid(num(n, line)?),
        ["body", n] => Instruction::HandlerBody(num(n, line)?),
        ["mov", r, v] => {
            let reg =
                Reg::from_name(r).ok_or_else(|| err(line, format!("unknown register `{r}`")))?;
            Instruction::LoadImm {
                reg,
                value: operand(v, line)?,
            }
        }
        ["ptmap", g, p] => Instruction::PtMap {
            gva: addr(g)?.page(),
            gpa: addr(p)?.page(),
        },
        _ => return Err(err(line, format!("unknown instruction `{}`", t.join(" ")))),
    })
}

/// Write the scenario into a machine the gate has already initialized and
/// return the initial CPU state.
pub fn load(machine: &mut Machine, sc: &Scenario) -> Result<CpuState> {
    for o in &sc.objects {
        for (i, w) in o.init.iter().enumerate() {
            machine.load_word(o.gva.add(8 * i as u64), *w);
        }
    }
    for f in &sc.functions {
        for (i, insn) in f.body.iter().enumerate() {
            machine.load_insn(f.gva.add(INSN_SIZE * i as u64), *insn);
        }
    }
    for (v, name) in &sc.handlers {
        let gva = sc.symbols.get(name).expect("checked at parse").gva;
        machine.handler_overrides.insert(*v, gva);
    }
    gate::install_interrupt_sentries(machine);

    let n = machine.num_compartments();
    for &c in &sc.irq_disabled {
        let slot = machine.irq_enabled.get_mut(c).ok_or_else(|| {
            SimError::Scenario(format!("irq_disabled names unknown compartment {c}"))
        })?;
        *slot = false;
    }
    if sc.start_cmpt >= n {
        return Err(SimError::Scenario(format!(
            "start_cmpt {} out of range",
            sc.start_cmpt
        )));
    }
    let entry = sc.symbols.get(&sc.entry).expect("checked at parse").gva;
    Ok(CpuState {
        rip: entry,
        rsp: machine.stack_top(sc.start_cmpt),
        rflags_if: true,
        current_ept: sc.start_cmpt,
        euid: sc.euid,
        ..CpuState::default()
    })
}
