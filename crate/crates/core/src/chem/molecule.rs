use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Heavy atoms accepted by the kekulized SMILES subset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Element {
    B,
    C,
    N,
    O,
    F,
    P,
    S,
    Cl,
    Br,
    I,
}

impl Element {
    pub const ALL: [Element; 10] = [
        Element::B,
        Element::C,
        Element::N,
        Element::O,
        Element::F,
        Element::P,
        Element::S,
        Element::Cl,
        Element::Br,
        Element::I,
    ];

    pub fn symbol(self) -> &'static str {
        match self {
            Element::B => "B",
            Element::C => "C",
            Element::N => "N",
            Element::O => "O",
            Element::F => "F",
            Element::P => "P",
            Element::S => "S",
            Element::Cl => "Cl",
            Element::Br => "Br",
            Element::I => "I",
        }
    }

    pub fn from_symbol(s: &str) -> Option<Element> {
        Element::ALL.iter().copied().find(|e| e.symbol() == s)
    }
}

impl fmt::Display for Element {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

impl FromStr for Element {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Element::from_symbol(s).ok_or_else(|| Error::UnknownAtomType(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Bond {
    pub a: usize,
    pub b: usize,
    pub order: u8,
}

/// A hydrogen-suppressed molecular graph with explicit bond orders.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Molecule {
    pub atoms: Vec<Element>,
    pub bonds: Vec<Bond>,
}

impl Molecule {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn atom_count(&self) -> usize {
        self.atoms.len()
    }

    pub fn add_atom(&mut self, e: Element) -> usize {
        self.atoms.push(e);
        self.atoms.len() - 1
    }

    /// Adds a bond, rejecting self loops, out-of-range endpoints, duplicate
    /// pairs and orders outside 1..=3.
    pub fn add_bond(&mut self, a: usize, b: usize, order: u8) -> Result<(), Error> {
        if a == b || a >= self.atoms.len() || b >= self.atoms.len() {
            return Err(Error::InvalidMolecule(format!(
                "bad bond endpoints {a}-{b}"
            )));
        }
        if !(1..=3).contains(&order) {
            return Err(Error::InvalidMolecule(format!("bond order {order}")));
        }
        if self.bond_between(a, b).is_some() {
            return Err(Error::InvalidMolecule(format!("duplicate bond {a}-{b}")));
        }
        self.bonds.push(Bond { a, b, order });
        Ok(())
    }

    pub fn bond_between(&self, a: usize, b: usize) -> Option<u8> {
        self.bonds
            .iter()
            .find(|bd| (bd.a == a && bd.b == b) || (bd.a == b && bd.b == a))
            .map(|bd| bd.order)
    }

    /// Neighbour lists `(neighbour, order)` sorted by neighbour index.
    pub fn neighbors(&self) -> Vec<Vec<(usize, u8)>> {
        let mut adj = vec![Vec::new(); self.atoms.len()];
        for bd in &self.bonds {
            adj[bd.a].push((bd.b, bd.order));
            adj[bd.b].push((bd.a, bd.order));
        }
        for list in &mut adj {
            list.sort_unstable();
        }
        adj
    }

    pub fn bond_order_sums(&self) -> Vec<u32> {
        let mut sums = vec![0u32; self.atoms.len()];
        for bd in &self.bonds {
            sums[bd.a] += bd.order as u32;
            sums[bd.b] += bd.order as u32;
        }
        sums
    }

    pub fn is_connected(&self) -> bool {
        let n = self.atoms.len();
        if n == 0 {
            return false;
        }
        let adj = self.neighbors();
        let mut seen = vec![false; n];
        let mut stack = vec![0];
        seen[0] = true;
        let mut count = 1;
        while let Some(v) = stack.pop() {
            for &(w, _) in &adj[v] {
                if !seen[w] {
                    seen[w] = true;
                    count += 1;
                    stack.push(w);
                }
            }
        }
        count == n
    }

    /// Relabels atoms: new index of old atom `i` is `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Molecule {
        let mut atoms = vec![Element::C; self.atoms.len()];
        for (old, &new) in perm.iter().enumerate() {
            atoms[new] = self.atoms[old];
        }
        let bonds = self
            .bonds
            .iter()
            .map(|bd| Bond {
                a: perm[bd.a],
                b: perm[bd.b],
                order: bd.order,
            })
            .collect();
        Molecule { atoms, bonds }
    }
}

/// Exhaustive isomorphism test with degree/element pruning; intended for
/// small graphs in tests and audits.
pub fn is_isomorphic(a: &Molecule, b: &Molecule) -> bool {
    if a.atoms.len() != b.atoms.len() || a.bonds.len() != b.bonds.len() {
        return false;
    }
    let mut ea = a.atoms.clone();
    let mut eb = b.atoms.clone();
    ea.sort();
    eb.sort();
    if ea != eb {
        return false;
    }
    let n = a.atoms.len();
    let order = |m: &Molecule| {
        let mut mat = vec![0u8; n * n];
        for bd in &m.bonds {
            mat[bd.a * n + bd.b] = bd.order;
            mat[bd.b * n + bd.a] = bd.order;
        }
        mat
    };
    let (ma, mb) = (order(a), order(b));
    let deg_a: Vec<usize> = (0..n)
        .map(|i| ma[i * n..(i + 1) * n].iter().filter(|&&o| o > 0).count())
        .collect();
    let deg_b: Vec<usize> = (0..n)
        .map(|i| mb[i * n..(i + 1) * n].iter().filter(|&&o| o > 0).count())
        .collect();

    fn extend(
        depth: usize,
        mapping: &mut Vec<usize>,
        used: &mut Vec<bool>,
        ctx: &(
            usize,
            &Molecule,
            &Molecule,
            &[u8],
            &[u8],
            &[usize],
            &[usize],
        ),
    ) -> bool {
        let (n, a, b, ma, mb, da, db) = *ctx;
        if depth == n {
            return true;
        }
        for cand in 0..n {
            if used[cand] || a.atoms[depth] != b.atoms[cand] || da[depth] != db[cand] {
                continue;
            }
            let consistent =
                (0..depth).all(|prev| ma[depth * n + prev] == mb[cand * n + mapping[prev]]);
            if !consistent {
                continue;
            }
            used[cand] = true;
            mapping.push(cand);
            if extend(depth + 1, mapping, used, ctx) {
                return true;
            }
            mapping.pop();
            used[cand] = false;
        }
        false
    }

    let ctx = (n, a, b, &ma[..], &mb[..], &deg_a[..], &deg_b[..]);
    extend(0, &mut Vec::with_capacity(n), &mut vec![false; n], &ctx)
}
