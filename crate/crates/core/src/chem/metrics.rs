use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::canon::canonical_smiles;
use super::molecule::Molecule;
use super::valence::{check_validity, ValenceTable};
use crate::error::{Error, Result};

/// Generation quality ratios. Novelty and uniqueness are fractions of the
/// valid samples; both are reported as 0 when nothing is valid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub validity: f64,
    pub novelty: f64,
    pub uniqueness: f64,
    pub reconstruction: Option<f64>,
    pub sample_count: usize,
    pub valid_count: usize,
    pub no_valid_samples: bool,
}

/// Encode/decode outcome counts for the reconstruction ratio.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReconstructionCounts {
    pub exact: usize,
    pub attempts: usize,
}

pub fn compute_metrics(
    generated: &[Molecule],
    training_set: &HashSet<String>,
    reconstruction: Option<ReconstructionCounts>,
    table: &ValenceTable,
) -> Result<MetricsReport> {
    if generated.is_empty() {
        return Err(Error::Empty("generated sample list"));
    }
    let canon: Vec<String> = generated
        .iter()
        .filter(|m| check_validity(m, table))
        .map(|m| canonical_smiles(m).expect("valid molecules are connected"))
        .collect();
    let valid = canon.len();
    let (novelty, uniqueness) = if valid == 0 {
        (0.0, 0.0)
    } else {
        let novel = canon.iter().filter(|s| !training_set.contains(*s)).count();
        let unique: HashSet<&String> = canon.iter().collect();
        (
            novel as f64 / valid as f64,
            unique.len() as f64 / valid as f64,
        )
    };
    let reconstruction = reconstruction
        .filter(|r| r.attempts > 0)
        .map(|r| r.exact as f64 / r.attempts as f64);
    Ok(MetricsReport {
        validity: valid as f64 / generated.len() as f64,
        novelty,
        uniqueness,
        reconstruction,
        sample_count: generated.len(),
        valid_count: valid,
        no_valid_samples: valid == 0,
    })
}

/// Canonical strings of a training corpus, for novelty.
pub fn canonical_set(molecules: &[Molecule]) -> HashSet<String> {
    molecules
        .iter()
        .filter_map(|m| canonical_smiles(m).ok())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chem::smiles::parse_smiles;

    fn mols(list: &[&str]) -> Vec<Molecule> {
        list.iter().map(|s| parse_smiles(s).unwrap()).collect()
    }

    fn invalid() -> Molecule {
        parse_smiles("C(C)(C)(C)(C)C").unwrap()
    }

    #[test]
    fn all_invalid() {
        let gen = vec![invalid(); 10];
        let r = compute_metrics(&gen, &HashSet::new(), None, &ValenceTable::default()).unwrap();
        assert_eq!(r.validity, 0.0);
        assert_eq!((r.novelty, r.uniqueness), (0.0, 0.0));
        assert!(r.no_valid_samples);
    }

    #[test]
    fn identical_copies() {
        let gen = mols(&["CCO"; 4]);
        let r = compute_metrics(&gen, &HashSet::new(), None, &ValenceTable::default()).unwrap();
        assert_eq!(r.validity, 1.0);
        assert_eq!(r.novelty, 1.0);
        assert_eq!(r.uniqueness, 0.25);
    }

    #[test]
    fn mixed_batch_matches_recount() {
        let table = ValenceTable::default();
        let mut gen = mols(&["CCO", "OCC", "CC", "C=O", "N#N", "CCO"]);
        gen.push(invalid());
        let train = canonical_set(&mols(&["CC", "O=C"]));
        let r = compute_metrics(
            &gen,
            &train,
            Some(ReconstructionCounts {
                exact: 3,
                attempts: 4,
            }),
            &table,
        )
        .unwrap();
        // hash-set recount
        let valid: Vec<String> = gen
            .iter()
            .filter(|m| check_validity(m, &table))
            .map(|m| canonical_smiles(m).unwrap())
            .collect();
        let unique: HashSet<_> = valid.iter().cloned().collect();
        let novel = valid.iter().filter(|s| !train.contains(*s)).count();
        assert_eq!(r.valid_count, 6);
        assert!((r.validity - 6.0 / 7.0).abs() < 1e-15);
        assert!((r.uniqueness - unique.len() as f64 / 6.0).abs() < 1e-15);
        assert!((r.novelty - novel as f64 / 6.0).abs() < 1e-15);
        assert_eq!(unique.len(), 4);
        assert_eq!(novel, 4);
        assert_eq!(r.reconstruction, Some(0.75));

        gen.reverse();
        let r2 = compute_metrics(
            &gen,
            &train,
            Some(ReconstructionCounts {
                exact: 3,
                attempts: 4,
            }),
            &table,
        )
        .unwrap();
        assert_eq!(r, r2);
    }

    #[test]
    fn empty_is_error() {
        assert!(compute_metrics(&[], &HashSet::new(), None, &ValenceTable::default()).is_err());
    }
}
