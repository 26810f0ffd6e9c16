use std::path::Path;

use super::molecule::Molecule;
use super::smiles::parse_smiles;
use crate::error::{Error, Result};

/// Parses a SMILES-per-line dataset. Blank lines and lines starting with `#`
/// are skipped, and only the first whitespace-separated token of a line is
/// read (`#` is also the triple-bond symbol). A bad line fails the whole load
/// with its line number.
pub fn parse_dataset(text: &str) -> Result<Vec<Molecule>> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let smiles = line.split_whitespace().next().unwrap_or(line);
        let mol =
            parse_smiles(smiles).map_err(|e| Error::Data(format!("line {}: {e}", idx + 1)))?;
        out.push(mol);
    }
    Ok(out)
}

pub fn load_dataset(path: &Path) -> Result<Vec<Molecule>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    parse_dataset(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn skips_comments_and_blanks() {
        let text = "# header\nC\n\nCCO  ethanol\nC=O\tformaldehyde\n  # note\nCC#N\n";
        let mols = parse_dataset(text).unwrap();
        assert_eq!(mols.len(), 4);
        assert_eq!(mols[1].atom_count(), 3);
        assert_eq!(mols[3].bond_between(1, 2), Some(3));
    }

    #[test]
    fn bad_line_reports_line_number() {
        let err = parse_dataset("C\nC(C\n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }
}
