use std::collections::{BTreeMap, BTreeSet};

use super::symbols::SymbolTable;
use super::{
    AccessMatrix, CompartmentPolicy, Diagnostic, ExecutionContext, MatrixRow, ResolvedCall,
    Severity,
};
use crate::addr::{Address, Permission};
use crate::error::{Result, SimError};
use crate::machine::layout;

fn lookup<'a>(symtab: &'a SymbolTable, name: &str) -> Result<&'a super::Symbol> {
    symtab
        .get(name)
        .ok_or_else(|| SimError::UnknownSymbol(name.to_string()))
}

fn target_for(
    policies: &[CompartmentPolicy],
    source: &CompartmentPolicy,
    callee: &str,
    explicit: Option<usize>,
) -> Result<usize> {
    let target = match explicit {
        Some(t) => {
            if !policies.iter().any(|p| p.cmpt_id == t) {
                return Err(SimError::UnknownTarget {
                    source_cmpt: source.cmpt_id,
                    callee: callee.to_string(),
                    target: t,
                });
            }
            t
        }
        None => {
            let executors: Vec<usize> = policies
                .iter()
                .filter(|p| p.cmpt_id != 0 && p.can_execute.contains(callee))
                .map(|p| p.cmpt_id)
                .collect();
            match executors.as_slice() {
                [] => 0,
                [one] => *one,
                _ => {
                    return Err(SimError::AmbiguousCallTarget {
                        source_cmpt: source.cmpt_id,
                        callee: callee.to_string(),
                        candidates: executors,
                    })
                }
            }
        }
    };
    if target == source.cmpt_id {
        return Err(SimError::SelfCall(source.cmpt_id, callee.to_string()));
    }
    Ok(target)
}

/// Expand symbol names to pages and bind every `can_call` entry to an entry
/// address, a target EPT index and the target's execution context.
pub fn resolve(policies: &[CompartmentPolicy], symtab: &SymbolTable) -> Result<AccessMatrix> {
    if !policies.iter().any(|p| p.cmpt_id == 0) {
        return Err(SimError::MissingDefaultCompartment);
    }
    let mut seen = BTreeSet::new();
    for p in policies {
        if !seen.insert(p.cmpt_id) {
            return Err(SimError::DuplicateCompartment(p.cmpt_id));
        }
    }

    let non_default: Vec<&CompartmentPolicy> = policies.iter().filter(|p| p.cmpt_id != 0).collect();
    for (i, a) in non_default.iter().enumerate() {
        for b in &non_default[i + 1..] {
            if let (ExecutionContext::Exact(x), ExecutionContext::Exact(y)) = (a.context, b.context)
            {
                if x == y {
                    let (lo, hi) = (a.cmpt_id.min(b.cmpt_id), a.cmpt_id.max(b.cmpt_id));
                    return Err(SimError::ContextConflict(lo, hi));
                }
            }
        }
    }

    let mut rows = BTreeMap::new();
    for p in policies {
        let mut grants: BTreeMap<String, Permission> = BTreeMap::new();
        for name in p.named_symbols() {
            lookup(symtab, name)?;
            grants.insert(name.clone(), p.symbol_perms(name));
        }
        let mut pages: BTreeMap<Address, Permission> = BTreeMap::new();
        for (name, perms) in &grants {
            for page in lookup(symtab, name)?.pages() {
                let e = pages.entry(page).or_insert(Permission::NONE);
                *e = e.union(*perms);
            }
        }
        let mut can_call = Vec::with_capacity(p.can_call.len());
        for entry in &p.can_call {
            let sym = lookup(symtab, &entry.callee)?;
            let target = target_for(policies, p, &entry.callee, entry.target)?;
            let context = policies
                .iter()
                .find(|q| q.cmpt_id == target)
                .map(|q| q.context)
                .unwrap();
            can_call.push(ResolvedCall {
                callee: entry.callee.clone(),
                callee_gva: sym.gva,
                target,
                context,
            });
        }
        rows.insert(
            p.cmpt_id,
            MatrixRow {
                cmpt_id: p.cmpt_id,
                context: p.context,
                pages,
                grants,
                can_call,
            },
        );
    }
    Ok(AccessMatrix {
        rows,
        symbols: symtab.clone(),
    })
}

/// Per symbol: compartment → permission. A symbol named in no row belongs to
/// the default compartment with full access.
fn grant_maps(
    matrix: &AccessMatrix,
    symtab: &SymbolTable,
) -> BTreeMap<String, BTreeMap<usize, Permission>> {
    let mut out: BTreeMap<String, BTreeMap<usize, Permission>> = BTreeMap::new();
    for (id, row) in &matrix.rows {
        for (name, perms) in &row.grants {
            out.entry(name.clone()).or_default().insert(*id, *perms);
        }
    }
    for sym in symtab.iter() {
        out.entry(sym.name.clone())
            .or_insert_with(|| BTreeMap::from([(0, Permission::RWX)]));
    }
    out
}

/// Report sub-page co-location hazards (errors), deliberate sharing
/// (warnings) and symbols inside the gate's reserved region (errors).
pub fn check_layout(matrix: &AccessMatrix, symtab: &SymbolTable) -> Vec<Diagnostic> {
    let maps = grant_maps(matrix, symtab);
    let mut diags = Vec::new();

    let mut by_page: BTreeMap<Address, Vec<&str>> = BTreeMap::new();
    for sym in symtab.iter() {
        for page in sym.pages() {
            by_page.entry(page).or_default().push(&sym.name);
        }
    }
    for (page, names) in &by_page {
        if names.len() < 2 {
            continue;
        }
        let distinct: BTreeSet<&BTreeMap<usize, Permission>> =
            names.iter().map(|n| &maps[*n]).collect();
        let cmpts: BTreeSet<usize> = names
            .iter()
            .flat_map(|n| maps[*n].keys().copied())
            .collect();
        if distinct.len() > 1 && cmpts.len() > 1 {
            let list: Vec<String> = cmpts.iter().map(|c| c.to_string()).collect();
            diags.push(Diagnostic {
                severity: Severity::Error,
                message: format!(
                    "objects with different permissions share a page across compartments {}",
                    list.join(", ")
                ),
                pages: vec![*page],
                symbols: names.iter().map(|s| s.to_string()).collect(),
            });
        }
    }

    for sym in symtab.iter() {
        let rows = &maps[&sym.name];
        let explicit: Vec<usize> = matrix
            .rows
            .iter()
            .filter(|(_, r)| r.grants.contains_key(&sym.name))
            .map(|(id, _)| *id)
            .collect();
        if explicit.len() > 1 {
            let list: Vec<String> = rows.keys().map(|c| c.to_string()).collect();
            diags.push(Diagnostic {
                severity: Severity::Warn,
                message: format!(
                    "`{}` is shared by compartments {}",
                    sym.name,
                    list.join(", ")
                ),
                pages: sym.pages().collect(),
                symbols: vec![sym.name.clone()],
            });
        }
        let overlaps_reserved =
            sym.gva.0 < layout::RESERVED_END && sym.end().0 > layout::RESERVED_START;
        if overlaps_reserved {
            diags.push(Diagnostic {
                severity: Severity::Error,
                message: format!("`{}` overlaps the gate's reserved region", sym.name),
                pages: sym.pages().collect(),
                symbols: vec![sym.name.clone()],
            });
        }
    }
    diags
}
