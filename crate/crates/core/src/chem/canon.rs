//! Canonical SMILES by colour refinement plus individualisation: every tie
//! class is split in all possible ways and the lexicographically smallest
//! string wins, so isomorphic molecules always map to the same text.

use super::molecule::Molecule;
use super::smiles::write_smiles;
use crate::error::Error;

fn rank(keys: &[Vec<u64>]) -> Vec<u64> {
    let mut sorted: Vec<&Vec<u64>> = keys.iter().collect();
    sorted.sort();
    sorted.dedup();
    keys.iter()
        .map(|k| sorted.binary_search(&k).expect("key present") as u64)
        .collect()
}

fn class_count(colors: &[u64]) -> usize {
    let mut c = colors.to_vec();
    c.sort_unstable();
    c.dedup();
    c.len()
}

fn refine(colors: Vec<u64>, adj: &[Vec<(usize, u8)>]) -> Vec<u64> {
    let mut colors = colors;
    loop {
        let keys: Vec<Vec<u64>> = (0..colors.len())
            .map(|v| {
                let mut nb: Vec<u64> = adj[v]
                    .iter()
                    .map(|&(w, o)| colors[w] * 4 + o as u64)
                    .collect();
                nb.sort_unstable();
                let mut key = vec![colors[v]];
                key.extend(nb);
                key
            })
            .collect();
        let next = rank(&keys);
        if class_count(&next) == class_count(&colors) {
            return next;
        }
        colors = next;
    }
}

fn search(mol: &Molecule, adj: &[Vec<(usize, u8)>], colors: Vec<u64>, best: &mut Option<String>) {
    let colors = refine(colors, adj);
    let n = colors.len();
    // smallest colour shared by more than one atom
    let mut counts = vec![0usize; n];
    for &c in &colors {
        counts[c as usize] += 1;
    }
    let tie = (0..n).find(|&c| counts[c] > 1);
    match tie {
        None => {
            let perm: Vec<usize> = colors.iter().map(|&c| c as usize).collect();
            let s = write_smiles(&mol.permuted(&perm)).expect("connected molecule");
            if best.as_ref().is_none_or(|b| s < *b) {
                *best = Some(s);
            }
        }
        Some(tie_color) => {
            for v in (0..n).filter(|&v| colors[v] as usize == tie_color) {
                // give v its own colour just below the rest of its class
                let split: Vec<u64> = colors
                    .iter()
                    .enumerate()
                    .map(|(w, &c)| {
                        if w == v || c < tie_color as u64 {
                            2 * c
                        } else {
                            2 * c + 1
                        }
                    })
                    .collect();
                search(mol, adj, split, best);
            }
        }
    }
}

/// Canonical string for a connected molecule.
pub fn canonical_smiles(mol: &Molecule) -> Result<String, Error> {
    if mol.atom_count() == 0 || !mol.is_connected() {
        return Err(Error::InvalidMolecule(
            "canonical form needs a connected, non-empty molecule".into(),
        ));
    }
    let adj = mol.neighbors();
    let initial: Vec<Vec<u64>> = (0..mol.atom_count())
        .map(|v| {
            let mut orders: Vec<u64> = adj[v].iter().map(|&(_, o)| o as u64).collect();
            orders.sort_unstable();
            let mut key = vec![mol.atoms[v] as u64, adj[v].len() as u64];
            key.extend(orders);
            key
        })
        .collect();
    let mut best = None;
    search(mol, &adj, rank(&initial), &mut best);
    Ok(best.expect("search visits at least one leaf"))
}
