//! Principal-plane walks through the latent space.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::GrfModel;
use crate::graph::{quantize, LatentPoint, MolGraph};
use crate::inversion::{encode, invert_flow, InversionConfig};
use crate::linalg::{dot, norm, sym_eigen, Matrix};
use crate::seed::{derive_seed, stream_rng};

/// Molecules encoded to fit the plane.
pub const PCA_SAMPLE: usize = 100;

/// Top two principal directions of a set of latent vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrincipalPlane {
    pub mean: Vec<f64>,
    pub axes: [Vec<f64>; 2],
    pub variances: [f64; 2],
}

impl PrincipalPlane {
    /// Coordinates of `z − mean` along the two axes.
    pub fn project(&self, z: &[f64]) -> [f64; 2] {
        let c: Vec<f64> = z.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        [dot(&c, &self.axes[0]), dot(&c, &self.axes[1])]
    }

    /// `center + a·e₁ + b·e₂`.
    pub fn offset(&self, center: &[f64], a: f64, b: f64) -> Vec<f64> {
        center
            .iter()
            .zip(self.axes[0].iter().zip(&self.axes[1]))
            .map(|(c, (e1, e2))| c + a * e1 + b * e2)
            .collect()
    }
}

/// Covariance eigendecomposition through the `n × n` Gram matrix, which is
/// far smaller than the `d × d` covariance when few points are given.
pub fn principal_plane(latents: &[Vec<f64>]) -> Result<PrincipalPlane> {
    let n = latents.len();
    if n < 2 {
        return Err(Error::DegenerateCovariance(format!(
            "need at least 2 latent vectors, got {n}"
        )));
    }
    let d = latents[0].len();
    if latents.iter().any(|z| z.len() != d) {
        return Err(Error::InvalidParameter(
            "latent vectors differ in length".into(),
        ));
    }
    let mut mean = vec![0.0; d];
    for z in latents {
        for (m, a) in mean.iter_mut().zip(z) {
            *m += a;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered: Vec<f64> = latents
        .iter()
        .flat_map(|z| z.iter().zip(&mean).map(|(a, m)| a - m))
        .collect();
    let xc = Matrix::from_vec(n, d, centered)?;
    let gram = xc.matmul(&xc.transpose())?.scale(1.0 / (n - 1) as f64);
    let (values, vectors) = sym_eigen(&gram)?;
    let top = values[n - 1];
    let second = values[n - 2];
    if !(top > 0.0) || second <= 1e-12 * top {
        return Err(Error::DegenerateCovariance(format!(
            "top eigenvalues {top:e} and {second:e} do not span a plane"
        )));
    }
    let axis = |col: usize| -> Vec<f64> {
        let u: Vec<f64> = (0..n).map(|i| vectors[(i, col)]).collect();
        let mut e = xc.matvec_t(&u);
        let s = norm(&e);
        e.iter_mut().for_each(|a| *a /= s);
        e
    };
    let e1 = orient(axis(n - 1));
    let mut e2 = axis(n - 2);
    let p = dot(&e1, &e2);
    e2.iter_mut().zip(&e1).for_each(|(a, b)| *a -= p * b);
    let s = norm(&e2);
    e2.iter_mut().for_each(|a| *a /= s);
    Ok(PrincipalPlane {
        mean,
        axes: [e1, orient(e2)],
        variances: [top, second],
    })
}

/// Fixes the sign so the largest-magnitude component is positive.
fn orient(mut e: Vec<f64>) -> Vec<f64> {
    let pivot = e
        .iter()
        .copied()
        .fold(0.0f64, |m, a| if a.abs() > m.abs() { a } else { m });
    if pivot < 0.0 {
        e.iter_mut().for_each(|a| *a = -*a);
    }
    e
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub row: usize,
    pub col: usize,
    /// Displacement along the two axes.
    pub offset: [f64; 2],
    pub graph: MolGraph,
}

/// Decodes a `size × size` mesh with spacing `step` centred on `center`.
pub fn decode_grid(
    model: &GrfModel,
    plane: &PrincipalPlane,
    center: &LatentPoint,
    size: usize,
    step: f64,
    cfg: &InversionConfig,
) -> Result<Vec<GridCell>> {
    if size == 0 {
        return Err(Error::InvalidParameter(
            "grid size must be at least 1".into(),
        ));
    }
    if !(step.is_finite() && step >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "grid step must be finite and non-negative, got {step}"
        )));
    }
    let flat = center.to_flat();
    if flat.len() != plane.mean.len() {
        return Err(Error::InvalidParameter(
            "center and plane dimensions differ".into(),
        ));
    }
    let half = (size as f64 - 1.0) / 2.0;
    (0..size * size)
        .into_par_iter()
        .map(|k| {
            let (row, col) = (k / size, k % size);
            let offset = [(row as f64 - half) * step, (col as f64 - half) * step];
            let z =
                LatentPoint::from_flat(&plane.offset(&flat, offset[0], offset[1]), model.spec())?;
            let dq = invert_flow(model, &z, cfg)?;
            Ok(GridCell {
                row,
                col,
                offset,
                graph: quantize(&dq.adjacency_c, &dq.features_c),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid {
    pub plane: PrincipalPlane,
    /// Index into the dataset of the molecule at the grid centre.
    pub query: usize,
    pub center: LatentPoint,
    pub cells: Vec<GridCell>,
}

/// Fits the plane on up to [`PCA_SAMPLE`] random molecules and decodes a
/// grid around a random query molecule.
pub fn latent_grid(
    model: &GrfModel,
    dataset: &[MolGraph],
    size: usize,
    step: f64,
    cfg: &InversionConfig,
    rng_seed: u64,
) -> Result<LatentGrid> {
    if dataset.len() < 2 {
        return Err(Error::DegenerateCovariance(format!(
            "need at least 2 molecules, got {}",
            dataset.len()
        )));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut stream_rng(rng_seed, 0));
    order.truncate(PCA_SAMPLE);
    let latents = order
        .par_iter()
        .map(|&i| {
            Ok(
                encode(model, &dataset[i], derive_seed(rng_seed, 2 + i as u64))?
                    .1
                    .to_flat(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let plane = principal_plane(&latents)?;
    let query = stream_rng(rng_seed, 1).random_range(0..dataset.len());
    let (_, center) = encode(
        model,
        &dataset[query],
        derive_seed(rng_seed, 2 + query as u64),
    )?;
    let cells = decode_grid(model, &plane, &center, size, step, cfg)?;
    Ok(LatentGrid {
        plane,
        query,
        center,
        cells,
    })
}
