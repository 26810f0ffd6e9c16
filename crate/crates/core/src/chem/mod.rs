//! Molecule ingestion and evaluation: SMILES, valence rules, canonical
//! strings and the validity/novelty/uniqueness/reconstruction metrics.

pub mod canon;
pub mod dataset;
pub mod metrics;
pub mod molecule;
pub mod smiles;
pub mod synth;
pub mod valence;

pub use canon::canonical_smiles;
pub use dataset::{load_dataset, parse_dataset};
pub use metrics::{canonical_set, compute_metrics, MetricsReport, ReconstructionCounts};
pub use molecule::{is_isomorphic, Bond, Element, Molecule};
pub use smiles::{parse_smiles, write_smiles, SmilesError, SmilesErrorKind};
pub use synth::random_molecule;
pub use valence::{check_validity, ValenceTable};
