use thiserror::Error;

use crate::chem::smiles::SmilesError;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    DimensionMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("matrix is not symmetric (max asymmetry {max_asymmetry:e})")]
    NotSymmetric { max_asymmetry: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("graph has {atoms} atoms but the model holds at most {n_max}")]
    GraphTooLarge { atoms: usize, n_max: usize },

    #[error("atom type {0:?} is not in the model vocabulary")]
    UnknownAtomType(String),

    #[error("invalid molecule: {0}")]
    InvalidMolecule(String),

    #[error(transparent)]
    Smiles(#[from] SmilesError),

    #[error("non-finite value produced in {layer}")]
    NonFinite { layer: String },

    #[error("log-det series requires Lip < 1, block bound is {bound}")]
    LipschitzViolation { bound: f64 },

    #[error("fixed-point iteration diverged at iteration {iteration} (distance {distance:e})")]
    Divergence { iteration: usize, distance: f64 },

    #[error("covariance is degenerate: {0}")]
    DegenerateCovariance(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("data error: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors that come from bad input files or records rather than
    /// from numerics.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::GraphTooLarge { .. }
                | Error::UnknownAtomType(_)
                | Error::InvalidMolecule(_)
                | Error::Smiles(_)
                | Error::Data(_)
                | Error::Io(_)
                | Error::Json(_)
                | Error::Empty(_)
        )
    }
}
