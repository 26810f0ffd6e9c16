use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::molecule::{Element, Molecule};
use crate::error::{Error, Result};

/// Maximum total bond order per element symbol.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ValenceTable(pub BTreeMap<String, u32>);

impl Default for ValenceTable {
    fn default() -> Self {
        let entries = [
            ("B", 3),
            ("C", 4),
            ("N", 3),
            ("O", 2),
            ("F", 1),
            ("P", 5),
            ("S", 6),
            ("Cl", 1),
            ("Br", 1),
            ("I", 1),
        ];
        ValenceTable(entries.iter().map(|&(s, v)| (s.to_string(), v)).collect())
    }
}

impl ValenceTable {
    /// Reads a JSON object mapping symbol to integer valence.
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let table: ValenceTable = serde_json::from_str(&text)?;
        for sym in table.0.keys() {
            if Element::from_symbol(sym).is_none() {
                return Err(Error::Data(format!(
                    "valence table entry {sym:?} is not a supported element"
                )));
            }
        }
        Ok(table)
    }

    pub fn max_valence(&self, e: Element) -> Option<u32> {
        self.0.get(e.symbol()).copied()
    }
}

/// Valid means: at least one atom, a single connected component, and no
/// atom whose bond-order sum exceeds its table valence. Atoms missing from
/// the table are invalid.
pub fn check_validity(mol: &Molecule, table: &ValenceTable) -> bool {
    if mol.atom_count() == 0 || !mol.is_connected() {
        return false;
    }
    mol.bond_order_sums()
        .iter()
        .zip(&mol.atoms)
        .all(|(&sum, &e)| table.max_valence(e).is_some_and(|max| sum <= max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chem::smiles::parse_smiles;

    #[test]
    fn basic_validity() {
        let t = ValenceTable::default();
        assert!(check_validity(&parse_smiles("C").unwrap(), &t));
        assert!(check_validity(&parse_smiles("C(C)(C)(C)C").unwrap(), &t));
        assert!(!check_validity(
            &parse_smiles("C(C)(C)(C)(C)C").unwrap(),
            &t
        ));
        assert!(!check_validity(&parse_smiles("O=O=O").unwrap(), &t));
        assert!(!check_validity(&Molecule::new(), &t));
        let mut two = Molecule::new();
        two.add_atom(Element::C);
        two.add_atom(Element::C);
        assert!(!check_validity(&two, &t));
    }

    #[test]
    fn unknown_element_is_invalid() {
        let mut t = ValenceTable::default();
        t.0.remove("S");
        assert!(!check_validity(&parse_smiles("CS").unwrap(), &t));
    }
}
