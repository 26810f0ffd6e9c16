//! Kekulized SMILES subset: organic-subset atoms (B C N O F P S Cl Br I),
//! explicit `-` `=` `#` bonds, branches, and ring closures `0-9` / `%nn`.
//! Hydrogens are implicit and never written.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use super::molecule::{Element, Molecule};
use crate::error::Error;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SmilesErrorKind {
    Empty,
    UnknownSymbol(char),
    UnclosedBranch,
    UnmatchedBranchClose,
    BranchWithoutAtom,
    DanglingRingClosure(u32),
    DanglingBond,
    BadRingClosure(u32),
    ConflictingRingBond(u32),
}

impl fmt::Display for SmilesErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SmilesErrorKind::Empty => write!(f, "empty SMILES"),
            SmilesErrorKind::UnknownSymbol(c) => write!(f, "unknown symbol {c:?}"),
            SmilesErrorKind::UnclosedBranch => write!(f, "unclosed branch"),
            SmilesErrorKind::UnmatchedBranchClose => write!(f, "')' without matching '('"),
            SmilesErrorKind::BranchWithoutAtom => write!(f, "branch or ring bond before any atom"),
            SmilesErrorKind::DanglingRingClosure(n) => write!(f, "ring closure {n} never closed"),
            SmilesErrorKind::DanglingBond => write!(f, "bond symbol not followed by an atom"),
            SmilesErrorKind::BadRingClosure(n) => {
                write!(f, "ring closure {n} closes onto an invalid partner")
            }
            SmilesErrorKind::ConflictingRingBond(n) => {
                write!(f, "ring closure {n} has conflicting bond orders")
            }
        }
    }
}

/// Parse failure with the byte offset it was detected at.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{kind} at byte {offset}")]
pub struct SmilesError {
    pub kind: SmilesErrorKind,
    pub offset: usize,
}

fn fail<T>(kind: SmilesErrorKind, offset: usize) -> Result<T, SmilesError> {
    Err(SmilesError { kind, offset })
}

struct OpenRing {
    atom: usize,
    order: Option<u8>,
    offset: usize,
}

pub fn parse_smiles(s: &str) -> Result<Molecule, SmilesError> {
    let bytes = s.as_bytes();
    let mut mol = Molecule::new();
    let mut prev: Option<usize> = None;
    let mut pending_bond: Option<(u8, usize)> = None;
    let mut branch_stack: Vec<(Option<usize>, usize)> = Vec::new();
    let mut rings: BTreeMap<u32, OpenRing> = BTreeMap::new();
    let mut i = 0;

    if s.trim().is_empty() {
        return fail(SmilesErrorKind::Empty, 0);
    }

    while i < bytes.len() {
        let c = bytes[i];
        let start = i;
        match c {
            b'-' | b'=' | b'#' => {
                if prev.is_none() {
                    return fail(SmilesErrorKind::BranchWithoutAtom, start);
                }
                if pending_bond.is_some() {
                    return fail(SmilesErrorKind::DanglingBond, start);
                }
                let order = match c {
                    b'-' => 1,
                    b'=' => 2,
                    _ => 3,
                };
                pending_bond = Some((order, start));
                i += 1;
            }
            b'(' => {
                let Some(p) = prev else {
                    return fail(SmilesErrorKind::BranchWithoutAtom, start);
                };
                if pending_bond.is_some() {
                    return fail(SmilesErrorKind::DanglingBond, start);
                }
                branch_stack.push((Some(p), start));
                i += 1;
            }
            b')' => {
                if let Some((_, off)) = pending_bond {
                    return fail(SmilesErrorKind::DanglingBond, off);
                }
                let Some((atom, _)) = branch_stack.pop() else {
                    return fail(SmilesErrorKind::UnmatchedBranchClose, start);
                };
                prev = atom;
                i += 1;
            }
            b'0'..=b'9' | b'%' => {
                let number = if c == b'%' {
                    let digits = bytes.get(i + 1..i + 3);
                    match digits {
                        Some(d) if d.iter().all(u8::is_ascii_digit) => {
                            i += 3;
                            ((d[0] - b'0') as u32) * 10 + (d[1] - b'0') as u32
                        }
                        _ => return fail(SmilesErrorKind::UnknownSymbol('%'), start),
                    }
                } else {
                    i += 1;
                    (c - b'0') as u32
                };
                let Some(here) = prev else {
                    return fail(SmilesErrorKind::BranchWithoutAtom, start);
                };
                let order = pending_bond.take().map(|(o, _)| o);
                match rings.remove(&number) {
                    None => {
                        rings.insert(
                            number,
                            OpenRing {
                                atom: here,
                                order,
                                offset: start,
                            },
                        );
                    }
                    Some(open) => {
                        let order = match (open.order, order) {
                            (Some(a), Some(b)) if a != b => {
                                return fail(SmilesErrorKind::ConflictingRingBond(number), start)
                            }
                            (Some(a), _) | (None, Some(a)) => a,
                            (None, None) => 1,
                        };
                        if mol.add_bond(open.atom, here, order).is_err() {
                            return fail(SmilesErrorKind::BadRingClosure(number), start);
                        }
                    }
                }
            }
            _ => {
                let (element, width) = match (c, bytes.get(i + 1)) {
                    (b'C', Some(b'l')) => (Element::Cl, 2),
                    (b'B', Some(b'r')) => (Element::Br, 2),
                    (b'B', _) => (Element::B, 1),
                    (b'C', _) => (Element::C, 1),
                    (b'N', _) => (Element::N, 1),
                    (b'O', _) => (Element::O, 1),
                    (b'F', _) => (Element::F, 1),
                    (b'P', _) => (Element::P, 1),
                    (b'S', _) => (Element::S, 1),
                    (b'I', _) => (Element::I, 1),
                    _ => {
                        let ch = s[i..].chars().next().unwrap_or('?');
                        return fail(SmilesErrorKind::UnknownSymbol(ch), start);
                    }
                };
                let idx = mol.add_atom(element);
                if let Some(p) = prev {
                    let order = pending_bond.take().map_or(1, |(o, _)| o);
                    mol.add_bond(p, idx, order)
                        .expect("fresh atom cannot duplicate a bond");
                }
                prev = Some(idx);
                i += width;
            }
        }
    }

    if let Some((_, off)) = pending_bond {
        return fail(SmilesErrorKind::DanglingBond, off);
    }
    if let Some(&(_, off)) = branch_stack.last() {
        return fail(SmilesErrorKind::UnclosedBranch, off);
    }
    if let Some((&number, open)) = rings.iter().next() {
        return fail(SmilesErrorKind::DanglingRingClosure(number), open.offset);
    }
    Ok(mol)
}

fn bond_symbol(order: u8) -> &'static str {
    match order {
        2 => "=",
        3 => "#",
        _ => "",
    }
}

fn ring_label(n: u32) -> String {
    if n < 10 {
        n.to_string()
    } else {
        format!("%{n:02}")
    }
}

/// Writes a connected molecule as SMILES: depth-first from atom 0, visiting
/// neighbours in ascending index order, lowest free ring labels first.
pub fn write_smiles(mol: &Molecule) -> Result<String, Error> {
    let n = mol.atom_count();
    if n == 0 {
        return Err(Error::InvalidMolecule("no atoms".into()));
    }
    if !mol.is_connected() {
        return Err(Error::InvalidMolecule("molecule is disconnected".into()));
    }
    let adj = mol.neighbors();

    // Spanning tree by DFS; non-tree edges become ring closures.
    let mut visited = vec![false; n];
    let mut children: Vec<Vec<(usize, u8)>> = vec![Vec::new(); n];
    let mut ring_open: Vec<Vec<(usize, u8)>> = vec![Vec::new(); n];
    let mut ring_close: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut pos = vec![usize::MAX; n];
    let mut counter = 0;

    fn dfs(
        v: usize,
        parent: Option<usize>,
        adj: &[Vec<(usize, u8)>],
        visited: &mut [bool],
        pos: &mut [usize],
        counter: &mut usize,
        children: &mut [Vec<(usize, u8)>],
        ring_open: &mut [Vec<(usize, u8)>],
        ring_close: &mut [Vec<usize>],
    ) {
        visited[v] = true;
        pos[v] = *counter;
        *counter += 1;
        for &(w, order) in &adj[v] {
            if Some(w) == parent {
                continue;
            }
            if visited[w] {
                // w is an ancestor still on the stack: back edge, recorded once
                if pos[w] < pos[v] && !ring_close[v].contains(&w) {
                    ring_open[w].push((v, order));
                    ring_close[v].push(w);
                }
                continue;
            }
            children[v].push((w, order));
            dfs(
                w,
                Some(v),
                adj,
                visited,
                pos,
                counter,
                children,
                ring_open,
                ring_close,
            );
        }
    }
    dfs(
        0,
        None,
        &adj,
        &mut visited,
        &mut pos,
        &mut counter,
        &mut children,
        &mut ring_open,
        &mut ring_close,
    );

    let mut out = String::new();
    let mut labels_in_use: BTreeMap<(usize, usize), u32> = BTreeMap::new();
    let mut free: Vec<bool> = vec![true; 100];

    fn emit(
        v: usize,
        mol: &Molecule,
        out: &mut String,
        children: &[Vec<(usize, u8)>],
        ring_open: &[Vec<(usize, u8)>],
        ring_close: &[Vec<usize>],
        pos: &[usize],
        labels: &mut BTreeMap<(usize, usize), u32>,
        free: &mut [bool],
    ) {
        out.push_str(mol.atoms[v].symbol());
        let mut closes: Vec<usize> = ring_close[v].clone();
        closes.sort_by_key(|&w| pos[w]);
        for w in closes {
            let label = labels.remove(&(w, v)).expect("ring opened before close");
            out.push_str(&ring_label(label));
            free[label as usize] = true;
        }
        let mut opens = ring_open[v].clone();
        opens.sort_by_key(|&(w, _)| pos[w]);
        for (w, order) in opens {
            let label = (1..100)
                .find(|&l| free[l])
                .expect("fewer than 99 open rings") as u32;
            free[label as usize] = false;
            labels.insert((v, w), label);
            out.push_str(bond_symbol(order));
            out.push_str(&ring_label(label));
        }
        let kids = &children[v];
        for (k, &(w, order)) in kids.iter().enumerate() {
            let last = k + 1 == kids.len();
            if !last {
                out.push('(');
            }
            out.push_str(bond_symbol(order));
            emit(
                w, mol, out, children, ring_open, ring_close, pos, labels, free,
            );
            if !last {
                out.push(')');
            }
        }
    }
    emit(
        0,
        mol,
        &mut out,
        &children,
        &ring_open,
        &ring_close,
        &pos,
        &mut labels_in_use,
        &mut free,
    );
    Ok(out)
}
