//! Symbol map: one `name hex-gva decimal-size` triple per line.

use std::collections::BTreeMap;

use crate::addr::{pages_covering, Address};
use crate::error::{parse_err, InputKind, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Symbol {
    pub name: String,
    pub gva: Address,
    pub size: u64,
}

impl Symbol {
    pub fn new(name: impl Into<String>, gva: u64, size: u64) -> Self {
        Symbol {
            name: name.into(),
            gva: Address(gva),
            size,
        }
    }

    pub fn pages(&self) -> impl Iterator<Item = Address> {
        pages_covering(self.gva, self.size)
    }

    pub fn end(&self) -> Address {
        self.gva.add(self.size)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SymbolTable {
    symbols: Vec<Symbol>,
    index: BTreeMap<String, usize>,
}

impl SymbolTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert a symbol. Returns false if the name is already present.
    pub fn insert(&mut self, sym: Symbol) -> bool {
        if self.index.contains_key(&sym.name) {
            return false;
        }
        self.index.insert(sym.name.clone(), self.symbols.len());
        self.symbols.push(sym);
        true
    }

    pub fn get(&self, name: &str) -> Option<&Symbol> {
        self.index.get(name).map(|i| &self.symbols[*i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Symbol> {
        self.symbols.iter()
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    /// Symbols overlapping the page at `page`.
    pub fn on_page(&self, page: Address) -> impl Iterator<Item = &Symbol> {
        self.symbols
            .iter()
            .filter(move |s| s.pages().any(|p| p == page))
    }
}

impl FromIterator<Symbol> for SymbolTable {
    fn from_iter<T: IntoIterator<Item = Symbol>>(iter: T) -> Self {
        let mut t = SymbolTable::new();
        for s in iter {
            t.insert(s);
        }
        t
    }
}

pub(crate) fn parse_u64(tok: &str) -> Option<u64> {
    let t = tok.replace('_', "");
    if let Some(hex) = t.strip_prefix("0x").or_else(|| t.strip_prefix("0X")) {
        u64::from_str_radix(hex, 16).ok()
    } else {
        t.parse().ok()
    }
}

pub(crate) fn is_identifier(tok: &str) -> bool {
    let mut chars = tok.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
}

pub fn parse_symbols(text: &str) -> Result<SymbolTable> {
    let mut table = SymbolTable::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [name, gva, size] = fields.as_slice() else {
            return Err(parse_err(
                InputKind::SymbolMap,
                line_no,
                "expected `name hex-gva size`",
            ));
        };
        if !is_identifier(name) {
            return Err(parse_err(
                InputKind::SymbolMap,
                line_no,
                format!("bad symbol name `{name}`"),
            ));
        }
        let gva = gva
            .strip_prefix("0x")
            .and_then(|h| u64::from_str_radix(&h.replace('_', ""), 16).ok())
            .ok_or_else(|| {
                parse_err(
                    InputKind::SymbolMap,
                    line_no,
                    format!("bad hex address `{gva}`"),
                )
            })?;
        let size: u64 = size
            .parse()
            .map_err(|_| parse_err(InputKind::SymbolMap, line_no, format!("bad size `{size}`")))?;
        if size == 0 {
            return Err(parse_err(
                InputKind::SymbolMap,
                line_no,
                "symbol size must be at least 1",
            ));
        }
        if !table.insert(Symbol::new(*name, gva, size)) {
            return Err(parse_err(
                InputKind::SymbolMap,
                line_no,
                format!("duplicate symbol `{name}`"),
            ));
        }
    }
    Ok(table)
}

pub fn print_symbols(table: &SymbolTable) -> String {
    table
        .iter()
        .map(|s| format!("{} {:#x} {}\n", s.name, s.gva.0, s.size))
        .collect()
}
