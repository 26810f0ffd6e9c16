//! Random valence-respecting molecules for tests and toy datasets.

use rand::Rng;

use super::molecule::{Element, Molecule};
use super::valence::ValenceTable;

/// Grows a connected molecule atom by atom, attaching each new atom to a
/// random existing atom with free valence, then adds a few ring bonds.
/// Elements are drawn uniformly from `elements`; every result passes
/// [`check_validity`](super::valence::check_validity) for `table`.
pub fn random_molecule<R: Rng + ?Sized>(
    rng: &mut R,
    max_atoms: usize,
    elements: &[Element],
    table: &ValenceTable,
) -> Molecule {
    assert!(max_atoms >= 1 && !elements.is_empty());
    let valence = |e: Element| table.max_valence(e).unwrap_or(1);
    let target = rng.random_range(1..=max_atoms);
    let mut mol = Molecule::new();
    let mut used: Vec<u32> = Vec::new();

    // start from a branching atom so the chain can grow
    let branching: Vec<Element> = elements
        .iter()
        .copied()
        .filter(|&e| valence(e) >= 2)
        .collect();
    let pool = if branching.is_empty() {
        elements
    } else {
        &branching[..]
    };
    mol.add_atom(pool[rng.random_range(0..pool.len())]);
    used.push(0);

    while mol.atom_count() < target {
        let open: Vec<usize> = (0..mol.atom_count())
            .filter(|&i| used[i] < valence(mol.atoms[i]))
            .collect();
        if open.is_empty() {
            break;
        }
        let anchor = open[rng.random_range(0..open.len())];
        let e = elements[rng.random_range(0..elements.len())];
        let free = (valence(mol.atoms[anchor]) - used[anchor])
            .min(valence(e))
            .min(3);
        let order = if free > 1 && rng.random_bool(0.25) {
            rng.random_range(2..=free) as u8
        } else {
            1
        };
        let idx = mol.add_atom(e);
        used.push(0);
        mol.add_bond(anchor, idx, order).expect("fresh atom");
        used[anchor] += order as u32;
        used[idx] += order as u32;
    }

    // occasional ring closures between atoms at graph distance >= 2
    let n = mol.atom_count();
    if n >= 3 {
        for _ in 0..rng.random_range(0..=2) {
            let a = rng.random_range(0..n);
            let b = rng.random_range(0..n);
            if a == b || mol.bond_between(a, b).is_some() {
                continue;
            }
            if used[a] < valence(mol.atoms[a]) && used[b] < valence(mol.atoms[b]) {
                mol.add_bond(a, b, 1).expect("checked");
                used[a] += 1;
                used[b] += 1;
            }
        }
    }
    mol
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chem::valence::check_validity;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn generated_molecules_are_valid() {
        let table = ValenceTable::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let elements = [Element::C, Element::N, Element::O, Element::F];
        for _ in 0..500 {
            let m = random_molecule(&mut rng, 9, &elements, &table);
            assert!(m.atom_count() <= 9);
            assert!(check_validity(&m, &table));
        }
    }
}
