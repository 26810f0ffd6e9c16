//! Gaussian prior, the stochastic log-determinant series and the full
//! change-of-variables log-likelihood.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{GrfModel, ResidualMap};
use crate::graph::{dequantize_with, DequantGraph, GraphSpec, LatentPoint, MolGraph};
use crate::linalg::{dot, exact_logabsdet, Matrix, Tensor3};
use crate::seed::{derive_seed, stream_rng};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

pub fn prior_logp_slice(z: &[f64]) -> f64 {
    -0.5 * dot(z, z) - HALF_LN_2PI * z.len() as f64
}

/// Standard normal log-density summed over every latent coordinate.
pub fn prior_logp(z: &LatentPoint) -> f64 {
    prior_logp_slice(z.z_adjacency.as_slice()) + prior_logp_slice(z.z_features.as_slice())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ProbeKind {
    #[default]
    Rademacher,
    Gaussian,
    /// Haar-random orthonormal directions scaled by `√d`. When at least `d`
    /// probes are requested only whole bases are used.
    Orthogonal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LogDetConfig {
    pub series_terms: usize,
    pub probes: usize,
    pub probe: ProbeKind,
    pub rng_seed: u64,
}

impl Default for LogDetConfig {
    fn default() -> Self {
        Self::training()
    }
}

impl LogDetConfig {
    pub fn training() -> Self {
        Self {
            series_terms: 8,
            probes: 1,
            probe: ProbeKind::Rademacher,
            rng_seed: 0,
        }
    }

    pub fn evaluation() -> Self {
        Self {
            series_terms: 20,
            probes: 4,
            probe: ProbeKind::Orthogonal,
            rng_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.series_terms == 0 || self.probes == 0 {
            return Err(Error::InvalidParameter(
                "log-det estimator needs series_terms >= 1 and probes >= 1".into(),
            ));
        }
        Ok(())
    }
}

fn orthonormal_basis<R: Rng + ?Sized>(d: usize, count: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        for _ in 0..2 {
            for b in &basis {
                let c = dot(&v, b);
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
            }
        }
        let n = dot(&v, &v).sqrt();
        if n > 1e-8 {
            v.iter_mut().for_each(|x| *x /= n);
            basis.push(v);
        }
    }
    basis
}

/// Probe vectors with `E[v] = 0` and `E[v vᵀ] = I`, shaped `rows × cols`.
pub fn draw_probes<R: Rng + ?Sized>(
    kind: ProbeKind,
    shape: (usize, usize),
    count: usize,
    rng: &mut R,
) -> Vec<Matrix> {
    let (rows, cols) = shape;
    let d = rows * cols;
    let make = |data: Vec<f64>| Matrix::from_vec(rows, cols, data).expect("probe size");
    match kind {
        ProbeKind::Rademacher => (0..count)
            .map(|_| {
                make(
                    (0..d)
                        .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
                        .collect(),
                )
            })
            .collect(),
        ProbeKind::Gaussian => (0..count)
            .map(|_| make((0..d).map(|_| rng.sample(StandardNormal)).collect()))
            .collect(),
        ProbeKind::Orthogonal => {
            let scale = (d as f64).sqrt();
            let mut out = Vec::with_capacity(count);
            if count >= d {
                for _ in 0..count / d {
                    out.extend(orthonormal_basis(d, d, rng));
                }
            } else {
                out.extend(orthonormal_basis(d, count, rng));
            }
            out.into_iter()
                .map(|v| make(v.into_iter().map(|x| x * scale).collect()))
                .collect()
        }
    }
}

fn check_contractive(block: &dyn ResidualMap) -> Result<()> {
    let bound = block.lipschitz_bound();
    if !(bound < 1.0) {
        return Err(Error::LipschitzViolation { bound });
    }
    Ok(())
}

/// `Σ_{k=1}^{K} (−1)^{k+1} mean_v[vᵀ J^k v] / k` with the given probes.
pub fn logdet_series_with_probes(
    block: &dyn ResidualMap,
    x: &Matrix,
    probes: &[Matrix],
    terms: usize,
) -> Result<f64> {
    check_contractive(block)?;
    if probes.is_empty() || terms == 0 {
        return Err(Error::InvalidParameter(
            "need at least one probe and one term".into(),
        ));
    }
    let jvp = block.linearize(x);
    let mut total = 0.0;
    for v in probes {
        let mut w = v.clone();
        for k in 1..=terms {
            w = jvp(&w);
            let sign = if k % 2 == 1 { 1.0 } else { -1.0 };
            total += sign * dot(v.as_slice(), w.as_slice()) / k as f64;
        }
    }
    Ok(total / probes.len() as f64)
}

/// Stochastic estimate of `log det(I + J_R(x))`.
pub fn logdet_series(block: &dyn ResidualMap, x: &Matrix, cfg: &LogDetConfig) -> Result<f64> {
    cfg.validate()?;
    let mut rng = stream_rng(cfg.rng_seed, 0);
    let probes = draw_probes(cfg.probe, block.shape(), cfg.probes, &mut rng);
    logdet_series_with_probes(block, x, &probes, cfg.series_terms)
}

/// Dense `J_R(x)` over the row-major flattening of `x`.
pub fn block_jacobian(block: &dyn ResidualMap, x: &Matrix) -> Matrix {
    let (r, c) = block.shape();
    let d = r * c;
    let jvp = block.linearize(x);
    let mut j = Matrix::zeros(d, d);
    for col in 0..d {
        let mut e = Matrix::zeros(r, c);
        e.as_mut_slice()[col] = 1.0;
        let out = jvp(&e);
        for (row, &v) in out.as_slice().iter().enumerate() {
            j[(row, col)] = v;
        }
    }
    j
}

/// `log|det(I + J_R(x))|` by LU on the materialised Jacobian.
pub fn exact_block_logdet(block: &dyn ResidualMap, x: &Matrix) -> Result<f64> {
    let mut j = block_jacobian(block, x);
    for i in 0..j.rows() {
        j[(i, i)] += 1.0;
    }
    Ok(exact_logabsdet(&j)?.value)
}

/// How per-block log-determinants are obtained.
#[derive(Debug, Clone, PartialEq)]
pub enum LogDetMethod {
    Series(LogDetConfig),
    /// Dense Jacobian and LU; for small models and audits.
    Exact,
}

/// Per-sample record of the terms of the log-likelihood.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowTrace {
    pub adjacency_logdets: Vec<f64>,
    pub feature_logdets: Vec<f64>,
    pub prior_logp: f64,
    pub total_logp: f64,
}

impl FlowTrace {
    pub fn logdet_total(&self) -> f64 {
        self.adjacency_logdets
            .iter()
            .chain(&self.feature_logdets)
            .sum()
    }
}

fn block_logdet(
    block: &dyn ResidualMap,
    x: &Matrix,
    method: &LogDetMethod,
    stream_seed: u64,
) -> Result<f64> {
    match method {
        LogDetMethod::Exact => exact_block_logdet(block, x),
        LogDetMethod::Series(cfg) => {
            cfg.validate()?;
            let mut rng = stream_rng(stream_seed, 0);
            let probes = draw_probes(cfg.probe, block.shape(), cfg.probes, &mut rng);
            logdet_series_with_probes(block, x, &probes, cfg.series_terms)
        }
    }
}

/// Seed of the probe stream for block `index` of a sample.
pub(crate) fn probe_seed(cfg_seed: u64, sample_seed: u64, index: usize) -> u64 {
    derive_seed(derive_seed(cfg_seed, sample_seed), 1 + index as u64)
}

/// Log-likelihood of an already dequantised graph; `adjacency` is the
/// discrete tensor the feature flow is conditioned on.
pub fn logp_dequantized(
    model: &GrfModel,
    dq: &DequantGraph,
    adjacency: &Tensor3,
    method: &LogDetMethod,
    rng_seed: u64,
) -> Result<(LatentPoint, FlowTrace)> {
    let cfg_seed = match method {
        LogDetMethod::Series(c) => c.rng_seed,
        LogDetMethod::Exact => 0,
    };
    let mut adjacency_logdets = Vec::with_capacity(model.adjacency_blocks.len());
    let mut z = model.adjacency_to_rows(&dq.adjacency_c)?;
    for (i, b) in model.prepared_adjacency_blocks().iter().enumerate() {
        adjacency_logdets.push(block_logdet(
            b,
            &z,
            method,
            probe_seed(cfg_seed, rng_seed, i),
        )?);
        z = b.forward(&z);
    }
    let z_adjacency = model.rows_to_adjacency(z)?;

    let offset = model.adjacency_blocks.len();
    let mut feature_logdets = Vec::with_capacity(model.feature_blocks.len());
    let mut zx = dq.features_c.clone();
    for (i, b) in model.prepared_feature_blocks(adjacency)?.iter().enumerate() {
        feature_logdets.push(block_logdet(
            b,
            &zx,
            method,
            probe_seed(cfg_seed, rng_seed, offset + i),
        )?);
        zx = b.forward(&zx);
    }
    let latent = LatentPoint {
        z_adjacency,
        z_features: zx,
    };
    let prior = prior_logp(&latent);
    let mut trace = FlowTrace {
        adjacency_logdets,
        feature_logdets,
        prior_logp: prior,
        total_logp: 0.0,
    };
    trace.total_logp = prior + trace.logdet_total();
    if !trace.total_logp.is_finite() {
        let names = model.block_names();
        let all: Vec<f64> = trace
            .adjacency_logdets
            .iter()
            .chain(&trace.feature_logdets)
            .copied()
            .collect();
        let layer = all
            .iter()
            .position(|v| !v.is_finite())
            .map_or_else(|| "prior".to_string(), |i| names[i].clone());
        return Err(Error::NonFinite { layer });
    }
    Ok((latent, trace))
}

/// Dequantise `g` with seed `rng_seed`, run both flows and sum the terms.
pub fn full_logp(
    model: &GrfModel,
    g: &MolGraph,
    cfg: &LogDetConfig,
    rng_seed: u64,
) -> Result<FlowTrace> {
    full_logp_with(model, g, &LogDetMethod::Series(cfg.clone()), rng_seed)
}

pub fn full_logp_with(
    model: &GrfModel,
    g: &MolGraph,
    method: &LogDetMethod,
    rng_seed: u64,
) -> Result<FlowTrace> {
    let mut rng = stream_rng(rng_seed, 0);
    let dq = dequantize_with(g, model.config.noise_scale, &mut rng)?;
    Ok(logp_dequantized(model, &dq, &g.adjacency, method, rng_seed)?.1)
}

/// Latent draw with per-part standard deviations `t_x`, `t_a`. With
/// `truncate`, draws beyond `±2t` are resampled.
pub fn sample_prior_with<R: Rng + ?Sized>(
    spec: &GraphSpec,
    t_x: f64,
    t_a: f64,
    truncate: bool,
    rng: &mut R,
) -> Result<LatentPoint> {
    if !(t_x > 0.0 && t_a > 0.0) || !t_x.is_finite() || !t_a.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "temperatures must be positive, got t_x={t_x}, t_a={t_a}"
        )));
    }
    let mut draw = |t: f64| loop {
        let s: f64 = rng.sample(StandardNormal);
        if !truncate || s.abs() <= 2.0 {
            return t * s;
        }
    };
    let (n, _, r) = spec.adjacency_dims();
    let adjacency: Vec<f64> = (0..n * n * r).map(|_| draw(t_a)).collect();
    let features: Vec<f64> = (0..spec.feature_len()).map(|_| draw(t_x)).collect();
    Ok(LatentPoint {
        z_adjacency: Tensor3::from_vec(spec.adjacency_dims(), adjacency)?,
        z_features: Matrix::from_vec(spec.n_max, spec.n_atom_types(), features)?,
    })
}

pub fn sample_prior(
    spec: &GraphSpec,
    t_x: f64,
    t_a: f64,
    truncate: bool,
    rng_seed: u64,
) -> Result<LatentPoint> {
    let mut rng = stream_rng(rng_seed, 0);
    sample_prior_with(spec, t_x, t_a, truncate, &mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Scaled(f64, (usize, usize));

    impl ResidualMap for Scaled {
        fn shape(&self) -> (usize, usize) {
            self.1
        }
        fn residual(&self, x: &Matrix) -> Matrix {
            x.scale(self.0)
        }
        fn linearize<'a>(&'a self, _x: &Matrix) -> Box<dyn Fn(&Matrix) -> Matrix + Sync + 'a> {
            Box::new(move |v| v.scale(self.0))
        }
        fn lipschitz_bound(&self) -> f64 {
            self.0.abs()
        }
    }

    #[test]
    fn prior_at_origin() {
        assert!((prior_logp_slice(&[0.0]) + 0.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-15);
        assert!((prior_logp_slice(&[0.0, 0.0]) + (2.0 * std::f64::consts::PI).ln()).abs() < 1e-14);
    }

    #[test]
    fn scalar_series_matches_closed_form() {
        let block = Scaled(0.5, (1, 1));
        let x = Matrix::from_rows(&[&[1.0]]);
        let cfg = LogDetConfig {
            series_terms: 30,
            ..LogDetConfig::training()
        };
        let est = logdet_series(&block, &x, &cfg).unwrap();
        assert!((est - 1.5f64.ln()).abs() < 1e-6);
        assert!((exact_block_logdet(&block, &x).unwrap() - 1.5f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn zero_block_gives_zero() {
        let block = Scaled(0.0, (2, 3));
        let x = Matrix::zeros(2, 3);
        for kind in [
            ProbeKind::Rademacher,
            ProbeKind::Gaussian,
            ProbeKind::Orthogonal,
        ] {
            let cfg = LogDetConfig {
                probe: kind,
                probes: 7,
                ..LogDetConfig::training()
            };
            assert_eq!(logdet_series(&block, &x, &cfg).unwrap(), 0.0);
        }
    }

    #[test]
    fn over_budget_block_is_rejected() {
        let block = Scaled(1.0, (1, 1));
        let err =
            logdet_series(&block, &Matrix::zeros(1, 1), &LogDetConfig::training()).unwrap_err();
        assert!(matches!(err, Error::LipschitzViolation { .. }));
    }

    #[test]
    fn probes_have_identity_second_moment() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for kind in [
            ProbeKind::Rademacher,
            ProbeKind::Gaussian,
            ProbeKind::Orthogonal,
        ] {
            let probes = draw_probes(kind, (1, 3), 30_000, &mut rng);
            let mut second = [[0.0; 3]; 3];
            let mut mean = [0.0; 3];
            for p in &probes {
                let s = p.as_slice();
                for i in 0..3 {
                    mean[i] += s[i];
                    for j in 0..3 {
                        second[i][j] += s[i] * s[j];
                    }
                }
            }
            let n = probes.len() as f64;
            for i in 0..3 {
                assert!((mean[i] / n).abs() < 0.03, "{kind:?} mean");
                for j in 0..3 {
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!((second[i][j] / n - want).abs() < 0.03, "{kind:?} cov");
                }
            }
        }
    }

    #[test]
    fn orthogonal_probes_use_whole_bases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let probes = draw_probes(ProbeKind::Orthogonal, (2, 2), 10, &mut rng);
        assert_eq!(probes.len(), 8);
        for a in 0..4 {
            for b in 0..4 {
                let d = dot(probes[a].as_slice(), probes[b].as_slice());
                let want = if a == b { 4.0 } else { 0.0 };
                assert!((d - want).abs() < 1e-12);
            }
        }
        assert_eq!(
            draw_probes(ProbeKind::Orthogonal, (2, 2), 3, &mut rng).len(),
            3
        );
    }

    #[test]
    fn temperature_scales_standard_deviation() {
        let spec = GraphSpec::qm9(9);
        let mut sum = 0.0;
        let mut count = 0usize;
        let mut seed = 0;
        while count < 100_000 {
            let z = sample_prior(&spec, 0.65, 0.69, false, seed).unwrap();
            for &v in z.z_features.as_slice() {
                sum += v * v;
            }
            count += z.z_features.len();
            seed += 1;
        }
        let var = sum / count as f64;
        assert!((var / (0.65 * 0.65) - 1.0).abs() < 0.02, "{var}");
        let z = sample_prior(&spec, 0.15, 0.17, true, 3).unwrap();
        assert!(z.z_adjacency.as_slice().iter().all(|v| v.abs() <= 0.34));
        assert!(sample_prior(&spec, 0.0, 0.5, false, 0).is_err());
    }
}
