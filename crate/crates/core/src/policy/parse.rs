use std::collections::BTreeSet;

use super::symbols::{is_identifier, parse_u64};
use super::{CanCallEntry, CompartmentPolicy, ExecutionContext};
use crate::error::{parse_err, InputKind, Result, SimError};

const KEYS: [&str; 6] = [
    "cmpt_id",
    "can_execute",
    "can_read",
    "can_write",
    "can_call",
    "execution_context",
];

fn err(line: usize, msg: impl Into<String>) -> SimError {
    parse_err(InputKind::Policy, line, msg)
}

struct Block {
    policy: CompartmentPolicy,
    seen: BTreeSet<&'static str>,
    line: usize,
}

fn split_items(value: &str) -> Vec<&str> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect()
}

fn parse_symbol_set(
    value: &str,
    line: usize,
    allow_ellipsis: bool,
) -> Result<(BTreeSet<String>, bool)> {
    let mut set = BTreeSet::new();
    let mut open = false;
    for item in split_items(value) {
        if item == "..." {
            if !allow_ellipsis {
                return Err(err(
                    line,
                    "`...` is only allowed in the default compartment's can_execute",
                ));
            }
            open = true;
        } else if is_identifier(item) {
            set.insert(item.to_string());
        } else {
            return Err(err(line, format!("bad symbol name `{item}`")));
        }
    }
    Ok((set, open))
}

fn parse_call_item(item: &str, line: usize) -> Result<CanCallEntry> {
    let (name, suffix) = match item.find('(') {
        Some(pos) => (item[..pos].trim(), Some(item[pos..].trim())),
        None => (item.trim(), None),
    };
    if !is_identifier(name) {
        return Err(err(line, format!("bad callee name `{name}`")));
    }
    let target = match suffix {
        None => None,
        Some(s) => {
            let inner = s
                .strip_prefix('(')
                .and_then(|s| s.strip_suffix(')'))
                .ok_or_else(|| err(line, format!("malformed can_call suffix `{s}`")))?;
            let (k, v) = inner
                .split_once('=')
                .ok_or_else(|| err(line, format!("expected `cmpt_id=N`, found `{inner}`")))?;
            if k.trim() != "cmpt_id" {
                return Err(err(
                    line,
                    format!("unknown can_call attribute `{}`", k.trim()),
                ));
            }
            let id = v
                .trim()
                .parse::<usize>()
                .map_err(|_| err(line, format!("bad compartment id `{}`", v.trim())))?;
            Some(id)
        }
    };
    Ok(CanCallEntry {
        callee: name.to_string(),
        target,
    })
}

fn parse_context(value: &str, line: usize) -> Result<ExecutionContext> {
    let (k, v) = value
        .split_once('=')
        .ok_or_else(|| err(line, format!("expected `euid = ...`, found `{value}`")))?;
    if k.trim() != "euid" {
        return Err(err(
            line,
            format!("unknown execution context attribute `{}`", k.trim()),
        ));
    }
    match v.trim() {
        "any" => Ok(ExecutionContext::Any),
        "root" => Ok(ExecutionContext::ROOT),
        n => parse_u64(n)
            .map(ExecutionContext::Exact)
            .ok_or_else(|| err(line, format!("bad euid `{n}`"))),
    }
}

/// Parse a policy file into one policy per `cmpt_id:` block.
pub fn parse_policy(text: &str) -> Result<Vec<CompartmentPolicy>> {
    let mut out: Vec<CompartmentPolicy> = Vec::new();
    let mut current: Option<Block> = None;

    let finish = |block: Option<Block>, out: &mut Vec<CompartmentPolicy>| -> Result<()> {
        if let Some(b) = block {
            if out.iter().any(|p| p.cmpt_id == b.policy.cmpt_id) {
                return Err(err(
                    b.line,
                    format!("duplicate cmpt_id {}", b.policy.cmpt_id),
                ));
            }
            out.push(b.policy);
        }
        Ok(())
    };

    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            finish(current.take(), &mut out)?;
            continue;
        }
        let (key, value) = line
            .split_once(':')
            .ok_or_else(|| err(line_no, format!("expected `key: value`, found `{line}`")))?;
        let key = key.trim();
        let value = value.trim();
        let Some(key) = KEYS.iter().copied().find(|k| *k == key) else {
            return Err(err(line_no, format!("unknown key `{key}`")));
        };

        if key == "cmpt_id" {
            finish(current.take(), &mut out)?;
            let id = value
                .parse::<usize>()
                .map_err(|_| err(line_no, format!("bad compartment id `{value}`")))?;
            let mut seen = BTreeSet::new();
            seen.insert("cmpt_id");
            current = Some(Block {
                policy: CompartmentPolicy::new(id),
                seen,
                line: line_no,
            });
            continue;
        }

        let block = current
            .as_mut()
            .ok_or_else(|| err(line_no, format!("`{key}` outside a cmpt_id block")))?;
        if !block.seen.insert(key) {
            return Err(err(
                line_no,
                format!(
                    "duplicate key `{key}` in compartment {}",
                    block.policy.cmpt_id
                ),
            ));
        }
        let p = &mut block.policy;
        match key {
            "can_execute" => {
                let (set, open) = parse_symbol_set(value, line_no, p.cmpt_id == 0)?;
                p.can_execute = set;
                p.open_ended = open;
            }
            "can_read" => p.can_read = parse_symbol_set(value, line_no, false)?.0,
            "can_write" => p.can_write = parse_symbol_set(value, line_no, false)?.0,
            "can_call" => {
                p.can_call = split_items(value)
                    .into_iter()
                    .map(|item| parse_call_item(item, line_no))
                    .collect::<Result<_>>()?;
            }
            "execution_context" => p.context = parse_context(value, line_no)?,
            _ => unreachable!(),
        }
    }
    finish(current.take(), &mut out)?;

    if !out.iter().any(|p| p.cmpt_id == 0) {
        return Err(SimError::MissingDefaultCompartment);
    }
    Ok(out)
}

fn join(set: &BTreeSet<String>) -> String {
    set.iter().cloned().collect::<Vec<_>>().join(", ")
}

/// Canonical text form; `parse_policy(print_policy(p)) == p`.
pub fn print_policy(policies: &[CompartmentPolicy]) -> String {
    let mut out = String::new();
    for (i, p) in policies.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        out.push_str(&format!("cmpt_id: {}\n", p.cmpt_id));
        let mut exec = join(&p.can_execute);
        if p.open_ended {
            if !exec.is_empty() {
                exec.push_str(", ");
            }
            exec.push_str("...");
        }
        out.push_str(&format!("can_execute: {exec}\n"));
        out.push_str(&format!("can_read: {}\n", join(&p.can_read)));
        out.push_str(&format!("can_write: {}\n", join(&p.can_write)));
        let calls: Vec<String> = p
            .can_call
            .iter()
            .map(|c| match c.target {
                Some(t) => format!("{} (cmpt_id={t})", c.callee),
                None => c.callee.clone(),
            })
            .collect();
        out.push_str(&format!("can_call: {}\n", calls.join(", ")));
        out.push_str(&format!("execution_context: {}\n", p.context));
    }
    out
}
