//! Randomised property suites behind `grf selfcheck`.

use std::fmt::Write as _;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::flow::{GcnBlock, GcnMode, LinearWeight, PreparedBlock, ResidualMap};
use crate::graph::augmented_normalized_adjacency_of;
use crate::inversion::{invert_residual_layer_traced, normalized_l2, InversionConfig};
use crate::likelihood::{
    block_jacobian, exact_block_logdet, logdet_series, LogDetConfig, ProbeKind,
};
use crate::linalg::{sigma_max, sym_eigen, sym_eigenvalues, Matrix, Tensor3};
use crate::seed::{derive_seed, stream_rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelfcheckConfig {
    pub seed: u64,
    pub product_norm_instances: usize,
    pub spectrum_instances: usize,
    pub lipschitz_instances: usize,
    pub logdet_blocks: usize,
    pub inversion_instances: usize,
    /// Test hook: scales the first weight of every Lipschitz-suite layer to
    /// spectral norm 1.5.
    pub inject_over_budget: bool,
}

impl Default for SelfcheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            product_norm_instances: 10_000,
            spectrum_instances: 10_000,
            lipschitz_instances: 10_000,
            logdet_blocks: 50,
            inversion_instances: 100,
            inject_over_budget: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteResult {
    pub name: String,
    pub criterion: String,
    pub instances: usize,
    pub violations: usize,
    /// Largest value of the checked quantity (ratio, slack or error).
    pub worst: f64,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfcheckReport {
    pub suites: Vec<SuiteResult>,
}

impl SelfcheckReport {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(SuiteResult::passed)
    }

    /// Fixed-width table, one row per suite.
    pub fn render(&self) -> String {
        let mut out = String::new();
        writeln!(
            out,
            "{:<12} {:<44} {:>9} {:>10} {:>12}  status",
            "suite", "criterion", "instances", "violations", "worst"
        )
        .unwrap();
        for s in &self.suites {
            writeln!(
                out,
                "{:<12} {:<44} {:>9} {:>10} {:>12.4e}  {}",
                s.name,
                s.criterion,
                s.instances,
                s.violations,
                s.worst,
                if s.passed() { "PASS" } else { "FAIL" }
            )
            .unwrap();
        }
        out
    }
}

/// Random symmetric one-hot adjacency with the last channel as "no bond".
pub fn random_adjacency<R: Rng + ?Sized>(
    n: usize,
    channels: usize,
    density: f64,
    rng: &mut R,
) -> Tensor3 {
    let mut t = Tensor3::zeros(n, n, channels);
    for i in 0..n {
        t[(i, i, channels - 1)] = 1.0;
        for j in i + 1..n {
            let c = if rng.random_bool(density) {
                rng.random_range(0..channels - 1)
            } else {
                channels - 1
            };
            t[(i, j, c)] = 1.0;
            t[(j, i, c)] = 1.0;
        }
    }
    t
}

/// A prepared GCN block on a random graph with `n` nodes and `m` features.
pub fn random_gcn_block<R: Rng + ?Sized>(
    n: usize,
    m: usize,
    depth: usize,
    budget: f64,
    rng: &mut R,
) -> Result<PreparedBlock> {
    let adjacency = random_adjacency(n, 4, 0.4, rng);
    let block = GcnBlock::new(m, depth, budget, GcnMode::Collapsed, 4, true, rng)?;
    block.prepare(&[augmented_normalized_adjacency_of(&adjacency)])
}

fn run<F>(seed: u64, suite: u64, count: usize, f: F) -> Vec<f64>
where
    F: Fn(&mut ChaCha8Rng) -> f64 + Sync,
{
    let base = derive_seed(seed, suite);
    (0..count)
        .into_par_iter()
        .map(|i| f(&mut stream_rng(base, i as u64)))
        .collect()
}

fn summarize(name: &str, criterion: &str, values: &[f64], ok: impl Fn(f64) -> bool) -> SuiteResult {
    SuiteResult {
        name: name.into(),
        criterion: criterion.into(),
        instances: values.len(),
        violations: values.iter().filter(|&&v| !ok(v)).count(),
        worst: values.iter().copied().fold(f64::NEG_INFINITY, |a, b| {
            if a.is_nan() || b.is_nan() {
                f64::NAN
            } else {
                a.max(b)
            }
        }),
    }
}

/// `‖AX‖_F − ‖A‖₂‖X‖_F` over random shapes.
pub fn product_norm_suite(seed: u64, count: usize) -> SuiteResult {
    let slack = run(seed, 1, count, |rng| {
        let (m, k, c) = (
            rng.random_range(1..=8),
            rng.random_range(1..=8),
            rng.random_range(1..=8),
        );
        let a = Matrix::random_normal(m, k, rng).scale(rng.random_range(0.1..3.0));
        let x = Matrix::random_normal(k, c, rng);
        a.matmul(&x).expect("shapes").frobenius_norm() - sigma_max(&a) * x.frobenius_norm()
    });
    summarize(
        "product_norm",
        "||AX||_F <= ||A||_2 ||X||_F + 1e-9",
        &slack,
        |s| s <= 1e-9,
    )
}

/// Largest `|λ(P)|` of random normalized adjacencies.
pub fn spectrum_suite(seed: u64, count: usize) -> SuiteResult {
    let radius = run(seed, 2, count, |rng| {
        let n = rng.random_range(1..=12);
        let density = rng.random_range(0.0..1.0);
        let p = augmented_normalized_adjacency_of(&random_adjacency(n, 4, density, rng));
        sym_eigenvalues(&p).map_or(f64::NAN, |v| v.iter().fold(0.0f64, |m, l| m.max(l.abs())))
    });
    summarize("spectrum", "max |lambda(P)| <= 1 + 1e-9", &radius, |r| {
        r <= 1.0 + 1e-9
    })
}

/// Lipschitz ratios of random GCN residuals, along each block's own bound
/// and along the top singular direction of the Jacobian at a random point.
pub fn lipschitz_suite(seed: u64, count: usize, inject_over_budget: bool) -> SuiteResult {
    let ratios = run(seed, 3, count, |rng| {
        let (n, m) = (rng.random_range(1..=6), rng.random_range(1..=4));
        let depth = rng.random_range(1..=2);
        let adjacency = random_adjacency(n, 4, rng.random_range(0.0..1.0), rng);
        let mode = if rng.random_bool(0.5) {
            GcnMode::Collapsed
        } else {
            GcnMode::PerChannel
        };
        let props = match mode {
            GcnMode::Collapsed => vec![augmented_normalized_adjacency_of(&adjacency)],
            GcnMode::PerChannel => crate::graph::per_channel_normalized_adjacency(&adjacency),
        };
        let Ok(mut block) = GcnBlock::new(m, depth, 0.9, mode, 3, true, rng) else {
            return f64::NAN;
        };
        if inject_over_budget {
            for layer in &mut block.stack.layers {
                let w = layer.weights[0].effective();
                let s = sigma_max(&w);
                if s > 0.0 {
                    layer.weights[0] = LinearWeight::from_matrix(w.scale(1.5 / s), rng);
                }
            }
        }
        let Ok(b) = block.prepare(&props) else {
            return f64::NAN;
        };
        let x = Matrix::random_normal(n, m, rng).scale(2.0);
        let j = block_jacobian(&b, &x);
        let Ok((_, vecs)) = sym_eigen(&j.transpose().matmul(&j).expect("square")) else {
            return f64::NAN;
        };
        let d = n * m;
        let top: Vec<f64> = (0..d).map(|i| vecs[(i, d - 1)] * 1e-4).collect();
        let y = x
            .add(&Matrix::from_vec(n, m, top).expect("shape"))
            .expect("shape");
        let along = b
            .residual(&x)
            .sub(&b.residual(&y))
            .expect("shape")
            .frobenius_norm()
            / x.sub(&y).expect("shape").frobenius_norm();
        let z = Matrix::random_normal(n, m, rng).scale(2.0);
        let random = b
            .residual(&x)
            .sub(&b.residual(&z))
            .expect("shape")
            .frobenius_norm()
            / x.sub(&z).expect("shape").frobenius_norm();
        b.lipschitz_bound().max(along).max(random)
    });
    summarize(
        "lipschitz",
        "Lip(R) < 1 (bound and adversarial pairs)",
        &ratios,
        |r| r < 1.0,
    )
}

/// Relative error of the series estimate (K=20, S=256, orthogonal probes)
/// against LU on the dense Jacobian; absolute error when the exact value is
/// below 0.5 in magnitude.
pub fn logdet_suite(seed: u64, count: usize) -> SuiteResult {
    let errs = run(seed, 4, count, |rng| {
        let (n, m) = (rng.random_range(1..=4), rng.random_range(1..=3));
        let Ok(b) = random_gcn_block(n, m, rng.random_range(1..=2), 0.9, rng) else {
            return f64::NAN;
        };
        let x = Matrix::random_normal(n, m, rng);
        let cfg = LogDetConfig {
            series_terms: 20,
            probes: 256,
            probe: ProbeKind::Orthogonal,
            rng_seed: rng.random(),
        };
        match (exact_block_logdet(&b, &x), logdet_series(&b, &x, &cfg)) {
            (Ok(exact), Ok(est)) => logdet_error(est, exact),
            _ => f64::NAN,
        }
    });
    summarize(
        "logdet",
        "series within 2% rel (0.01 abs near 0)",
        &errs,
        |e| e <= 1.0,
    )
}

/// Error scaled so that 1 is the tolerance edge.
pub fn logdet_error(estimate: f64, exact: f64) -> f64 {
    let diff = (estimate - exact).abs();
    if exact.abs() < 0.5 {
        diff / 0.01
    } else {
        diff / (0.02 * exact.abs())
    }
}

/// Normalized residual of QM9-shaped single-layer GCN blocks after 30
/// fixed-point iterations, checked against 1e-3 and against the a-priori
/// Banach bound.
pub fn inversion_suite(seed: u64, count: usize) -> SuiteResult {
    let scores = run(seed, 5, count, |rng| {
        let (n, m) = (9, 5);
        let Ok(b) = random_gcn_block(n, m, 1, 0.9, rng) else {
            return f64::NAN;
        };
        let y = Matrix::random_normal(n, m, rng);
        let Ok((x, dists)) = invert_residual_layer_traced(&b, &y, &InversionConfig::fixed(30))
        else {
            return f64::NAN;
        };
        let fx = b.forward(&x);
        let resid = fx.sub(&y).expect("shape").frobenius_norm();
        let l = b.lipschitz_bound();
        let banach = (1.0 + l) * l.powi(30) / (1.0 - l) * dists.first().copied().unwrap_or(0.0);
        if resid > banach + 1e-12 {
            return f64::INFINITY;
        }
        normalized_l2(fx.as_slice(), y.as_slice()) / 1e-3
    });
    summarize(
        "inversion",
        "30-step residual <= 1e-3 and Banach bound",
        &scores,
        |s| s <= 1.0,
    )
}

pub fn run_selfcheck(cfg: &SelfcheckConfig) -> SelfcheckReport {
    SelfcheckReport {
        suites: vec![
            product_norm_suite(cfg.seed, cfg.product_norm_instances),
            spectrum_suite(cfg.seed, cfg.spectrum_instances),
            lipschitz_suite(cfg.seed, cfg.lipschitz_instances, cfg.inject_over_budget),
            logdet_suite(cfg.seed, cfg.logdet_blocks),
            inversion_suite(cfg.seed, cfg.inversion_instances),
        ],
    }
}
