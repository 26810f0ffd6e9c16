//! Fixed-point inversion of residual blocks and two-step generation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{GrfModel, ResidualMap};
use crate::graph::{
    dequantize_with, quantize, quantize_adjacency, DequantGraph, LatentPoint, MolGraph,
};
use crate::likelihood::sample_prior;
use crate::linalg::Matrix;
use crate::seed::{derive_seed, stream_rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InversionConfig {
    pub iterations: usize,
    /// Stop once successive iterates are this close (L2); 0 disables.
    pub early_stop_tol: f64,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self {
            iterations: 100,
            early_stop_tol: 1e-8,
        }
    }
}

impl InversionConfig {
    pub fn fixed(iterations: usize) -> Self {
        Self {
            iterations,
            early_stop_tol: 0.0,
        }
    }
}

/// Consecutive growing steps tolerated before declaring divergence.
const DIVERGENCE_PATIENCE: usize = 5;

/// Solves `x + R(x) = y` by `x ← y − R(x)` from `x₀ = y`. Also returns the
/// successive-iterate distances.
pub fn invert_residual_layer_traced(
    block: &dyn ResidualMap,
    y: &Matrix,
    cfg: &InversionConfig,
) -> Result<(Matrix, Vec<f64>)> {
    let mut x = y.clone();
    let mut distances = Vec::with_capacity(cfg.iterations);
    let floor = 1e-12 * (1.0 + y.frobenius_norm());
    let mut growing = 0;
    for i in 0..cfg.iterations {
        let next = y.sub(&block.residual(&x))?;
        let dist = next.sub(&x)?.frobenius_norm();
        if !dist.is_finite() {
            return Err(Error::Divergence {
                iteration: i,
                distance: dist,
            });
        }
        if let Some(&prev) = distances.last() {
            if dist > prev && dist > floor {
                growing += 1;
                if growing >= DIVERGENCE_PATIENCE {
                    return Err(Error::Divergence {
                        iteration: i,
                        distance: dist,
                    });
                }
            } else {
                growing = 0;
            }
        }
        distances.push(dist);
        x = next;
        if dist <= cfg.early_stop_tol {
            break;
        }
    }
    Ok((x, distances))
}

pub fn invert_residual_layer(
    block: &dyn ResidualMap,
    y: &Matrix,
    cfg: &InversionConfig,
) -> Result<Matrix> {
    Ok(invert_residual_layer_traced(block, y, cfg)?.0)
}

/// Two-step inverse: adjacency blocks first, then feature blocks
/// conditioned on the argmax of the recovered adjacency.
pub fn invert_flow(
    model: &GrfModel,
    z: &LatentPoint,
    cfg: &InversionConfig,
) -> Result<DequantGraph> {
    z.check_shape(model.spec())?;
    let mut a = model.adjacency_to_rows(&z.z_adjacency)?;
    for b in model.prepared_adjacency_blocks().iter().rev() {
        a = invert_residual_layer(b, &a, cfg)?;
    }
    let adjacency_c = model.rows_to_adjacency(a)?;
    let a_hat = quantize_adjacency(&adjacency_c);
    let mut x = z.z_features.clone();
    for b in model.prepared_feature_blocks(&a_hat)?.iter().rev() {
        x = invert_residual_layer(b, &x, cfg)?;
    }
    Ok(DequantGraph {
        adjacency_c,
        features_c: x,
        noise_scale: model.config.noise_scale,
    })
}

/// Dequantises `g` with seed `rng_seed` and maps it to the latent space.
pub fn encode(
    model: &GrfModel,
    g: &MolGraph,
    rng_seed: u64,
) -> Result<(DequantGraph, LatentPoint)> {
    let mut rng = stream_rng(rng_seed, 0);
    let dq = dequantize_with(g, model.config.noise_scale, &mut rng)?;
    let z = model.forward(&dq, &g.adjacency)?;
    Ok((dq, z))
}

/// Samples the prior at temperatures `(t_x, t_a)` and decodes every draw.
/// Sample `i` uses its own seed stream, so the output does not depend on
/// thread scheduling.
pub fn generate(
    model: &GrfModel,
    count: usize,
    t_x: f64,
    t_a: f64,
    truncate: bool,
    cfg: &InversionConfig,
    rng_seed: u64,
) -> Result<Vec<MolGraph>> {
    (0..count)
        .into_par_iter()
        .map(|i| {
            let z = sample_prior(
                model.spec(),
                t_x,
                t_a,
                truncate,
                derive_seed(rng_seed, i as u64),
            )?;
            let g = invert_flow(model, &z, cfg)?;
            Ok(quantize(&g.adjacency_c, &g.features_c))
        })
        .collect()
}

/// `‖a − b‖₂` divided by the number of entries.
pub fn normalized_l2(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    if a.is_empty() {
        return 0.0;
    }
    let ss: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    ss.sqrt() / a.len() as f64
}

/// [`normalized_l2`] over all adjacency and feature entries together.
pub fn reconstruction_error(original: &DequantGraph, recovered: &DequantGraph) -> f64 {
    let mut a = original.adjacency_c.as_slice().to_vec();
    a.extend_from_slice(original.features_c.as_slice());
    let mut b = recovered.adjacency_c.as_slice().to_vec();
    b.extend_from_slice(recovered.features_c.as_slice());
    normalized_l2(&a, &b)
}
