//! Padded one-hot graph tensors, dequantisation, argmax quantisation and the
//! augmented normalised adjacency `P = D̃^{-1/2} Ã D̃^{-1/2}`.
//!
//! Layout conventions: the virtual ("no bond") channel is the last
//! adjacency channel, the virtual atom type the last feature column. Bond
//! channel `r < R - 1` holds bonds of order `r + 1`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::chem::{Element, Molecule};
use crate::error::{Error, Result};
use crate::linalg::{Matrix, Tensor3};

/// Shape and vocabulary of the padded graph tensors.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphSpec {
    pub n_max: usize,
    /// Non-virtual atom types, in feature-column order.
    pub atom_types: Vec<Element>,
    /// Bond channels including the virtual one.
    pub n_bond_types: usize,
}

impl GraphSpec {
    pub fn new(n_max: usize, atom_types: Vec<Element>, n_bond_types: usize) -> Result<Self> {
        if n_max == 0 || atom_types.is_empty() || n_bond_types < 2 {
            return Err(Error::InvalidParameter(format!(
                "graph spec needs n_max >= 1, >= 1 atom type and >= 2 bond channels \
                 (got {n_max}, {}, {n_bond_types})",
                atom_types.len()
            )));
        }
        Ok(Self {
            n_max,
            atom_types,
            n_bond_types,
        })
    }

    /// QM9-style vocabulary: C, N, O, F with single/double/triple bonds.
    pub fn qm9(n_max: usize) -> Self {
        Self {
            n_max,
            atom_types: vec![Element::C, Element::N, Element::O, Element::F],
            n_bond_types: 4,
        }
    }

    /// Feature columns M, including the virtual type.
    pub fn n_atom_types(&self) -> usize {
        self.atom_types.len() + 1
    }

    pub fn virtual_atom(&self) -> usize {
        self.atom_types.len()
    }

    pub fn virtual_bond(&self) -> usize {
        self.n_bond_types - 1
    }

    pub fn max_bond_order(&self) -> usize {
        self.n_bond_types - 1
    }

    pub fn adjacency_dims(&self) -> (usize, usize, usize) {
        (self.n_max, self.n_max, self.n_bond_types)
    }

    pub fn adjacency_len(&self) -> usize {
        self.n_max * self.n_max * self.n_bond_types
    }

    pub fn feature_len(&self) -> usize {
        self.n_max * self.n_atom_types()
    }

    /// Latent dimension D = N·N·R + N·M.
    pub fn latent_dim(&self) -> usize {
        self.adjacency_len() + self.feature_len()
    }
}

/// Discrete padded molecule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MolGraph {
    pub adjacency: Tensor3,
    pub features: Matrix,
}

impl MolGraph {
    pub fn n_max(&self) -> usize {
        self.features.rows()
    }

    pub fn n_atom_types(&self) -> usize {
        self.features.cols()
    }

    pub fn n_bond_types(&self) -> usize {
        self.adjacency.dims().2
    }

    /// Checks the one-hot, symmetry and empty-diagonal invariants.
    pub fn validate(&self) -> Result<()> {
        let (n, n2, r) = self.adjacency.dims();
        if n != n2 || n != self.features.rows() {
            return Err(Error::Data("adjacency and feature shapes disagree".into()));
        }
        let one_hot = |xs: &[f64]| {
            xs.iter().all(|&v| v == 0.0 || v == 1.0)
                && xs.iter().filter(|&&v| v == 1.0).count() == 1
        };
        for i in 0..n {
            if !one_hot(self.features.row(i)) {
                return Err(Error::Data(format!("feature row {i} is not one-hot")));
            }
            for j in 0..n {
                let f = self.adjacency.fiber(i, j);
                if !one_hot(f) {
                    return Err(Error::Data(format!("adjacency ({i},{j}) is not one-hot")));
                }
                if f != self.adjacency.fiber(j, i) {
                    return Err(Error::Data(format!("adjacency ({i},{j}) is not symmetric")));
                }
                if i == j && f[r - 1] != 1.0 {
                    return Err(Error::Data(format!("self bond on node {i}")));
                }
            }
        }
        Ok(())
    }

    /// Index of the hot entry in feature row `i`.
    pub fn atom_type(&self, i: usize) -> usize {
        argmax(self.features.row(i))
    }

    pub fn bond_channel(&self, i: usize, j: usize) -> usize {
        argmax(self.adjacency.fiber(i, j))
    }

    /// Number of non-virtual atoms.
    pub fn atom_count(&self) -> usize {
        let virt = self.n_atom_types() - 1;
        (0..self.n_max())
            .filter(|&i| self.atom_type(i) != virt)
            .count()
    }

    /// Converts back to a molecule. Virtual atoms are dropped together with
    /// any bond that touches them; kept atoms retain their relative order.
    pub fn to_molecule(&self, spec: &GraphSpec) -> Molecule {
        let virt_atom = spec.virtual_atom();
        let virt_bond = spec.virtual_bond();
        let mut index = vec![None; self.n_max()];
        let mut mol = Molecule::new();
        for (i, slot) in index.iter_mut().enumerate() {
            let t = self.atom_type(i);
            if t != virt_atom {
                *slot = Some(mol.add_atom(spec.atom_types[t]));
            }
        }
        for i in 0..self.n_max() {
            for j in (i + 1)..self.n_max() {
                let c = self.bond_channel(i, j);
                if c == virt_bond {
                    continue;
                }
                if let (Some(a), Some(b)) = (index[i], index[j]) {
                    mol.add_bond(a, b, (c + 1) as u8)
                        .expect("distinct atoms, one bond per pair");
                }
            }
        }
        mol
    }

    /// Relabels nodes: node `i` moves to `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> MolGraph {
        let (n, _, r) = self.adjacency.dims();
        let mut adjacency = Tensor3::zeros(n, n, r);
        let mut features = Matrix::zeros(n, self.n_atom_types());
        for i in 0..n {
            for c in 0..self.n_atom_types() {
                features[(perm[i], c)] = self.features[(i, c)];
            }
            for j in 0..n {
                adjacency
                    .fiber_mut(perm[i], perm[j])
                    .copy_from_slice(self.adjacency.fiber(i, j));
            }
        }
        MolGraph {
            adjacency,
            features,
        }
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Pads a molecule to `spec.n_max` nodes with virtual atoms and virtual bonds.
pub fn pad_graph(mol: &Molecule, spec: &GraphSpec) -> Result<MolGraph> {
    let n = spec.n_max;
    if mol.atom_count() > n {
        return Err(Error::GraphTooLarge {
            atoms: mol.atom_count(),
            n_max: n,
        });
    }
    let m = spec.n_atom_types();
    let r = spec.n_bond_types;
    let mut features = Matrix::zeros(n, m);
    for i in 0..n {
        let col = match mol.atoms.get(i) {
            Some(e) => spec
                .atom_types
                .iter()
                .position(|t| t == e)
                .ok_or_else(|| Error::UnknownAtomType(e.symbol().to_string()))?,
            None => spec.virtual_atom(),
        };
        features[(i, col)] = 1.0;
    }
    let mut adjacency = Tensor3::zeros(n, n, r);
    for i in 0..n {
        for j in 0..n {
            adjacency[(i, j, r - 1)] = 1.0;
        }
    }
    for bd in &mol.bonds {
        let order = bd.order as usize;
        if order > spec.max_bond_order() {
            return Err(Error::Data(format!(
                "bond order {order} exceeds the {} bond channels",
                spec.max_bond_order()
            )));
        }
        for (i, j) in [(bd.a, bd.b), (bd.b, bd.a)] {
            let f = adjacency.fiber_mut(i, j);
            f.iter_mut().for_each(|v| *v = 0.0);
            f[order - 1] = 1.0;
        }
    }
    Ok(MolGraph {
        adjacency,
        features,
    })
}

/// Dequantised graph `(A + c·u, X + c·u)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DequantGraph {
    pub adjacency_c: Tensor3,
    pub features_c: Matrix,
    pub noise_scale: f64,
}

impl DequantGraph {
    /// Elementwise floor, which recovers the discrete source graph.
    pub fn floor(&self) -> MolGraph {
        let mut adjacency = self.adjacency_c.clone();
        adjacency
            .as_mut_slice()
            .iter_mut()
            .for_each(|v| *v = v.floor());
        MolGraph {
            adjacency,
            features: self.features_c.map(f64::floor),
        }
    }
}

fn check_noise_scale(c: f64) -> Result<()> {
    if !(c > 0.0 && c < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "noise scale must lie in (0, 1), got {c}"
        )));
    }
    Ok(())
}

pub fn dequantize(g: &MolGraph, c: f64, rng_seed: u64) -> Result<DequantGraph> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    dequantize_with(g, c, &mut rng)
}

pub fn dequantize_with<R: Rng + ?Sized>(g: &MolGraph, c: f64, rng: &mut R) -> Result<DequantGraph> {
    check_noise_scale(c)?;
    let mut adjacency_c = g.adjacency.clone();
    for v in adjacency_c.as_mut_slice() {
        *v += c * rng.random::<f64>();
    }
    let mut features_c = g.features.clone();
    for v in features_c.as_mut_slice() {
        *v += c * rng.random::<f64>();
    }
    Ok(DequantGraph {
        adjacency_c,
        features_c,
        noise_scale: c,
    })
}

/// Argmax over bond channels after averaging `(i, j)` with `(j, i)`; ties go
/// to the lowest channel. The diagonal is always set to the virtual channel.
pub fn quantize_adjacency(a: &Tensor3) -> Tensor3 {
    let (n, _, r) = a.dims();
    let mut out = Tensor3::zeros(n, n, r);
    for i in 0..n {
        out[(i, i, r - 1)] = 1.0;
        for j in (i + 1)..n {
            let avg: Vec<f64> = a
                .fiber(i, j)
                .iter()
                .zip(a.fiber(j, i))
                .map(|(x, y)| 0.5 * (x + y))
                .collect();
            let k = argmax(&avg);
            out[(i, j, k)] = 1.0;
            out[(j, i, k)] = 1.0;
        }
    }
    out
}

/// Row-wise argmax, ties to the lowest column.
pub fn quantize_features(x: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        out[(i, argmax(x.row(i)))] = 1.0;
    }
    out
}

pub fn quantize(adjacency_c: &Tensor3, features_c: &Matrix) -> MolGraph {
    MolGraph {
        adjacency: quantize_adjacency(adjacency_c),
        features: quantize_features(features_c),
    }
}

fn normalize_augmented(mut a: Matrix) -> Matrix {
    let n = a.rows();
    for i in 0..n {
        a[(i, i)] += 1.0;
    }
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|i| 1.0 / a.row(i).iter().sum::<f64>().sqrt())
        .collect();
    for i in 0..n {
        for j in 0..n {
            a[(i, j)] *= inv_sqrt[i] * inv_sqrt[j];
        }
    }
    a
}

/// `P` from a discrete adjacency tensor with the non-virtual channels
/// collapsed (saturating) into one bond indicator.
pub fn augmented_normalized_adjacency_of(adjacency: &Tensor3) -> Matrix {
    let (n, _, r) = adjacency.dims();
    let mut a = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if i != j && adjacency.fiber(i, j)[..r - 1].iter().any(|&v| v > 0.0) {
                a[(i, j)] = 1.0;
            }
        }
    }
    normalize_augmented(a)
}

pub fn augmented_normalized_adjacency(g: &MolGraph) -> Matrix {
    augmented_normalized_adjacency_of(&g.adjacency)
}

/// One augmented normalised adjacency per non-virtual bond channel.
pub fn per_channel_normalized_adjacency(adjacency: &Tensor3) -> Vec<Matrix> {
    let (n, _, r) = adjacency.dims();
    (0..r - 1)
        .map(|c| {
            let mut a = Matrix::zeros(n, n);
            for i in 0..n {
                for j in 0..n {
                    if i != j && adjacency[(i, j, c)] > 0.0 {
                        a[(i, j)] = 1.0;
                    }
                }
            }
            normalize_augmented(a)
        })
        .collect()
}

/// Latent representation of a graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentPoint {
    pub z_adjacency: Tensor3,
    pub z_features: Matrix,
}

impl LatentPoint {
    /// Adjacency entries followed by feature entries.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.z_adjacency.as_slice().to_vec();
        v.extend_from_slice(self.z_features.as_slice());
        v
    }

    pub fn from_flat(flat: &[f64], spec: &GraphSpec) -> Result<Self> {
        if flat.len() != spec.latent_dim() {
            return Err(Error::DimensionMismatch {
                op: "latent_from_flat",
                left: (flat.len(), 1),
                right: (spec.latent_dim(), 1),
            });
        }
        let split = spec.adjacency_len();
        Ok(Self {
            z_adjacency: Tensor3::from_vec(spec.adjacency_dims(), flat[..split].to_vec())?,
            z_features: Matrix::from_vec(spec.n_max, spec.n_atom_types(), flat[split..].to_vec())?,
        })
    }

    pub fn check_shape(&self, spec: &GraphSpec) -> Result<()> {
        if self.z_adjacency.dims() != spec.adjacency_dims()
            || self.z_features.shape() != (spec.n_max, spec.n_atom_types())
        {
            return Err(Error::DimensionMismatch {
                op: "latent_shape",
                left: self.z_features.shape(),
                right: (spec.n_max, spec.n_atom_types()),
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chem::{parse_smiles, random_molecule, ValenceTable};
    use crate::linalg::sym_eigenvalues;

    fn random_graph(rng: &mut ChaCha8Rng, spec: &GraphSpec) -> MolGraph {
        let mol = random_molecule(rng, spec.n_max, &spec.atom_types, &ValenceTable::default());
        pad_graph(&mol, spec).unwrap()
    }

    #[test]
    fn pad_three_atoms() {
        let spec = GraphSpec::qm9(9);
        let g = pad_graph(&parse_smiles("CC=O").unwrap(), &spec).unwrap();
        g.validate().unwrap();
        for i in 3..9 {
            assert_eq!(g.atom_type(i), spec.virtual_atom());
        }
        assert_eq!(g.bond_channel(1, 2), 1);
        assert_eq!(g.bond_channel(0, 2), spec.virtual_bond());
        assert_eq!(g.atom_count(), 3);
        assert!(crate::chem::is_isomorphic(
            &g.to_molecule(&spec),
            &parse_smiles("CC=O").unwrap()
        ));
    }

    #[test]
    fn pad_full_and_oversized() {
        let spec = GraphSpec::qm9(3);
        let mol = parse_smiles("C1CC1").unwrap();
        let g = pad_graph(&mol, &spec).unwrap();
        assert_eq!(g.atom_count(), 3);
        assert!(crate::chem::is_isomorphic(&g.to_molecule(&spec), &mol));
        assert!(matches!(
            pad_graph(&parse_smiles("CCCC").unwrap(), &spec),
            Err(Error::GraphTooLarge { atoms: 4, n_max: 3 })
        ));
        assert!(matches!(
            pad_graph(&parse_smiles("CS").unwrap(), &spec),
            Err(Error::UnknownAtomType(_))
        ));
    }

    #[test]
    fn dequantize_floor_round_trip() {
        let spec = GraphSpec::qm9(9);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for s in 0..1000 {
            let g = random_graph(&mut rng, &spec);
            let d = dequantize(&g, 0.9, s).unwrap();
            assert!(d
                .adjacency_c
                .as_slice()
                .iter()
                .all(|&v| (0.0..1.9).contains(&v)));
            assert_eq!(d.floor(), g);
        }
    }

    #[test]
    fn dequantize_small_c_and_bad_c() {
        let spec = GraphSpec::qm9(4);
        let g = pad_graph(&parse_smiles("CO").unwrap(), &spec).unwrap();
        for c in [1e-3, 1e-9, 1e-15] {
            let d = dequantize(&g, c, 1).unwrap();
            let gap = d
                .adjacency_c
                .as_slice()
                .iter()
                .zip(g.adjacency.as_slice())
                .fold(0.0f64, |m, (a, b)| m.max(a - b));
            assert!(gap <= c);
        }
        assert!(dequantize(&g, 0.0, 1).is_err());
        assert!(dequantize(&g, 1.0, 1).is_err());
    }

    #[test]
    fn quantize_examples() {
        let mut a = Tensor3::zeros(2, 2, 4);
        a.fiber_mut(0, 1).copy_from_slice(&[0.95, 0.1, 0.1, 0.1]);
        a.fiber_mut(1, 0).copy_from_slice(&[0.95, 0.1, 0.1, 0.1]);
        let q = quantize_adjacency(&a);
        assert_eq!(q.fiber(0, 1), &[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(q.fiber(1, 0), &[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(q.fiber(0, 0), &[0.0, 0.0, 0.0, 1.0]);

        a.fiber_mut(0, 1).copy_from_slice(&[0.5, 0.5, 0.0, 0.0]);
        a.fiber_mut(1, 0).copy_from_slice(&[0.5, 0.5, 0.0, 0.0]);
        assert_eq!(quantize_adjacency(&a).fiber(0, 1), &[1.0, 0.0, 0.0, 0.0]);

        let x = Matrix::from_rows(&[&[0.2, 1.7, 0.4], &[0.3, 0.3, 0.1]]);
        let q = quantize_features(&x);
        assert_eq!(q.row(0), &[0.0, 1.0, 0.0]);
        assert_eq!(q.row(1), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn quantize_inverts_dequantize() {
        let spec = GraphSpec::qm9(9);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for s in 0..300 {
            let g = random_graph(&mut rng, &spec);
            let d = dequantize(&g, 0.9, s).unwrap();
            let q = quantize(&d.adjacency_c, &d.features_c);
            assert_eq!(q, g);
        }
    }

    #[test]
    fn quantized_output_is_a_valid_graph() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let a = Tensor3::from_vec((5, 5, 4), (0..100).map(|_| rng.random::<f64>()).collect())
                .unwrap();
            let x = Matrix::random_normal(5, 3, &mut rng);
            quantize(&a, &x).validate().unwrap();
        }
    }

    #[test]
    fn normalized_adjacency_examples() {
        let spec = GraphSpec::qm9(1);
        let g = pad_graph(&parse_smiles("C").unwrap(), &spec).unwrap();
        assert_eq!(
            augmented_normalized_adjacency(&g),
            Matrix::from_rows(&[&[1.0]])
        );

        let spec = GraphSpec::qm9(2);
        let g = pad_graph(&parse_smiles("CC").unwrap(), &spec).unwrap();
        let p = augmented_normalized_adjacency(&g);
        assert!(p.max_abs_diff(&Matrix::from_rows(&[&[0.5, 0.5], &[0.5, 0.5]])) < 1e-15);
    }

    #[test]
    fn normalized_adjacency_spectrum_in_unit_interval() {
        let spec = GraphSpec::qm9(9);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let g = random_graph(&mut rng, &spec);
            let p = augmented_normalized_adjacency(&g);
            assert!(p.max_asymmetry() == 0.0);
            for l in sym_eigenvalues(&p).unwrap() {
                assert!(l.abs() <= 1.0 + 1e-9);
            }
            for pc in per_channel_normalized_adjacency(&g.adjacency) {
                for l in sym_eigenvalues(&pc).unwrap() {
                    assert!(l.abs() <= 1.0 + 1e-9);
                }
            }
        }
    }

    #[test]
    fn latent_flat_round_trip() {
        let spec = GraphSpec::qm9(3);
        let flat: Vec<f64> = (0..spec.latent_dim()).map(|i| i as f64).collect();
        let z = LatentPoint::from_flat(&flat, &spec).unwrap();
        assert_eq!(z.to_flat(), flat);
        assert!(LatentPoint::from_flat(&flat[1..], &spec).is_err());
    }
}
