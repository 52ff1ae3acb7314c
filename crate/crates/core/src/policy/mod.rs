//! Compartment policies: the text format, symbol resolution, and the
//! access matrix consumed by the gate manager.
//!
//! Policy grammar (line oriented, `#` starts a comment):
//!
//! ```text
//! cmpt_id: 2
//! can_execute: func1, func2
//! can_read: obj1, obj2, obj3
//! can_write: obj1
//! can_call: func3, func4 (cmpt_id=1)
//! execution_context: euid = root
//! ```
//!
//! A block starts at `cmpt_id:` and ends at a blank line or the next
//! `cmpt_id:`. Missing keys mean empty sets and `euid = any`.

mod parse;
mod resolve;
mod symbols;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::addr::{Address, Permission};

pub use parse::{parse_policy, print_policy};
pub use resolve::{check_layout, resolve};
pub(crate) use symbols::parse_u64;
pub use symbols::{parse_symbols, print_symbols, Symbol, SymbolTable};

/// The eUID a compartment runs under.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ExecutionContext {
    Any,
    Exact(u64),
}

impl ExecutionContext {
    pub const ROOT: ExecutionContext = ExecutionContext::Exact(0);
    const ANY_ENCODING: u64 = u64::MAX;

    pub fn matches(self, euid: u64) -> bool {
        match self {
            ExecutionContext::Any => true,
            ExecutionContext::Exact(id) => id == euid,
        }
    }

    /// Word encoding used in the sentry read-only rows.
    pub fn encode(self) -> u64 {
        match self {
            ExecutionContext::Any => Self::ANY_ENCODING,
            ExecutionContext::Exact(id) => id,
        }
    }

    pub fn decode(word: u64) -> Self {
        if word == Self::ANY_ENCODING {
            ExecutionContext::Any
        } else {
            ExecutionContext::Exact(word)
        }
    }
}

impl fmt::Display for ExecutionContext {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExecutionContext::Any => f.write_str("euid = any"),
            ExecutionContext::Exact(0) => f.write_str("euid = root"),
            ExecutionContext::Exact(n) => write!(f, "euid = {n}"),
        }
    }
}

/// A `can_call` item as written; `target` is `None` when the
/// `(cmpt_id=N)` suffix is omitted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CanCallEntry {
    pub callee: String,
    pub target: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompartmentPolicy {
    pub cmpt_id: usize,
    pub can_execute: BTreeSet<String>,
    pub can_read: BTreeSet<String>,
    pub can_write: BTreeSet<String>,
    pub can_call: Vec<CanCallEntry>,
    pub context: ExecutionContext,
    /// The default compartment may end `can_execute` with `...`.
    pub open_ended: bool,
}

impl CompartmentPolicy {
    pub fn new(cmpt_id: usize) -> Self {
        CompartmentPolicy {
            cmpt_id,
            can_execute: BTreeSet::new(),
            can_read: BTreeSet::new(),
            can_write: BTreeSet::new(),
            can_call: Vec::new(),
            context: ExecutionContext::Any,
            open_ended: false,
        }
    }

    /// Permission a single symbol receives in this compartment.
    pub fn symbol_perms(&self, name: &str) -> Permission {
        Permission {
            read: self.can_read.contains(name),
            write: self.can_write.contains(name),
            execute: self.can_execute.contains(name),
        }
    }

    pub fn named_symbols(&self) -> impl Iterator<Item = &String> {
        self.can_execute
            .iter()
            .chain(self.can_read.iter())
            .chain(self.can_write.iter())
    }
}

/// A resolved `can_call` tuple as stored in a sentry read-only row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResolvedCall {
    pub callee: String,
    pub callee_gva: Address,
    pub target: usize,
    pub context: ExecutionContext,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatrixRow {
    pub cmpt_id: usize,
    pub context: ExecutionContext,
    /// Page → the single permission tuple this row grants on it.
    pub pages: BTreeMap<Address, Permission>,
    /// Symbol → permission, as listed in the policy.
    pub grants: BTreeMap<String, Permission>,
    pub can_call: Vec<ResolvedCall>,
}

impl MatrixRow {
    pub fn page_perms(&self, page: Address) -> Option<Permission> {
        self.pages.get(&page.page()).copied()
    }

    pub fn pages_with(&self, pred: impl Fn(Permission) -> bool) -> BTreeSet<Address> {
        self.pages
            .iter()
            .filter(|(_, p)| pred(**p))
            .map(|(a, _)| *a)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AccessMatrix {
    pub rows: BTreeMap<usize, MatrixRow>,
    pub symbols: SymbolTable,
}

impl AccessMatrix {
    pub fn row(&self, cmpt: usize) -> Option<&MatrixRow> {
        self.rows.get(&cmpt)
    }

    /// Number of EPTs needed: highest compartment id plus one.
    pub fn compartment_count(&self) -> usize {
        self.rows.keys().next_back().map_or(0, |m| m + 1)
    }

    /// Pages granted to at least one non-default compartment.
    pub fn compartmentalized_pages(&self) -> BTreeSet<Address> {
        self.rows
            .iter()
            .filter(|(id, _)| **id != 0)
            .flat_map(|(_, r)| r.pages.keys().copied())
            .collect()
    }

    /// Every page overlapped by a declared symbol.
    pub fn guest_pages(&self) -> BTreeSet<Address> {
        self.symbols.iter().flat_map(|s| s.pages()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Severity {
    Warn,
    Error,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub severity: Severity,
    pub message: String,
    pub pages: Vec<Address>,
    pub symbols: Vec<String>,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sev = match self.severity {
            Severity::Warn => "warning",
            Severity::Error => "error",
        };
        write!(f, "{sev}: {}", self.message)?;
        if !self.pages.is_empty() {
            let pages: Vec<String> = self.pages.iter().map(|p| p.to_string()).collect();
            write!(f, " [pages {}]", pages.join(", "))?;
        }
        if !self.symbols.is_empty() {
            write!(f, " [symbols {}]", self.symbols.join(", "))?;
        }
        Ok(())
    }
}

pub fn has_errors(diags: &[Diagnostic]) -> bool {
    diags.iter().any(|d| d.severity == Severity::Error)
}
