//! Spectrally normalised linear maps and the dense layers built from them.

use std::sync::OnceLock;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::{normalize_to_bound, spectral_norm_converged, Matrix, SpectralNormState};

fn gaussian<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Matrix::from_vec(rows, cols, data).expect("sized buffer")
}

/// Memoised spectral norm of the current weight values. Cleared whenever
/// the weight is handed out mutably; ignored by equality and serde.
#[derive(Debug, Clone, Default)]
pub struct SigmaCache(OnceLock<f64>);

impl PartialEq for SigmaCache {
    fn eq(&self, _: &Self) -> bool {
        true
    }
}

/// A `d_in × d_out` weight, either dense or factored as `U·Vᵀ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LinearWeight {
    Full {
        w: Matrix,
        state: SpectralNormState,
        #[serde(skip)]
        sigma: SigmaCache,
    },
    LowRank {
        u: Matrix,
        v: Matrix,
        state: SpectralNormState,
        #[serde(skip)]
        sigma: SigmaCache,
    },
}

impl LinearWeight {
    pub fn full<R: Rng + ?Sized>(d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let w = gaussian(d_in, d_out, 1.0 / (d_in as f64).sqrt(), rng);
        let state = SpectralNormState::new(d_in, d_out, rng);
        LinearWeight::Full {
            w,
            state,
            sigma: SigmaCache::default(),
        }
    }

    pub fn low_rank<R: Rng + ?Sized>(d_in: usize, d_out: usize, rank: usize, rng: &mut R) -> Self {
        let u = gaussian(d_in, rank, 1.0 / (d_in as f64).sqrt(), rng);
        let v = gaussian(d_out, rank, 1.0 / (rank as f64).sqrt(), rng);
        let state = SpectralNormState::new(d_in, d_out, rng);
        LinearWeight::LowRank {
            u,
            v,
            state,
            sigma: SigmaCache::default(),
        }
    }

    pub fn from_matrix<R: Rng + ?Sized>(w: Matrix, rng: &mut R) -> Self {
        let state = SpectralNormState::new(w.rows(), w.cols(), rng);
        LinearWeight::Full {
            w,
            state,
            sigma: SigmaCache::default(),
        }
    }

    pub fn d_in(&self) -> usize {
        match self {
            LinearWeight::Full { w, .. } => w.rows(),
            LinearWeight::LowRank { u, .. } => u.rows(),
        }
    }

    pub fn d_out(&self) -> usize {
        match self {
            LinearWeight::Full { w, .. } => w.cols(),
            LinearWeight::LowRank { v, .. } => v.rows(),
        }
    }

    /// The dense matrix this weight acts as.
    pub fn effective(&self) -> Matrix {
        match self {
            LinearWeight::Full { w, .. } => w.clone(),
            LinearWeight::LowRank { u, v, .. } => u.matmul_unchecked(&v.transpose()),
        }
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|m| m.len()).sum()
    }

    pub fn params(&self) -> Vec<&Matrix> {
        match self {
            LinearWeight::Full { w, .. } => vec![w],
            LinearWeight::LowRank { u, v, .. } => vec![u, v],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        match self {
            LinearWeight::Full { w, sigma, .. } => {
                *sigma = SigmaCache::default();
                vec![w]
            }
            LinearWeight::LowRank { u, v, sigma, .. } => {
                *sigma = SigmaCache::default();
                vec![u, v]
            }
        }
    }

    fn cache(&self) -> &SigmaCache {
        match self {
            LinearWeight::Full { sigma, .. } | LinearWeight::LowRank { sigma, .. } => sigma,
        }
    }

    pub fn state(&self) -> &SpectralNormState {
        match self {
            LinearWeight::Full { state, .. } | LinearWeight::LowRank { state, .. } => state,
        }
    }

    /// Converged largest singular value, warm-started from a copy of the
    /// stored state.
    pub fn sigma(&self) -> f64 {
        *self.cache().0.get_or_init(|| {
            let mut state = self.state().clone();
            spectral_norm_converged(&self.effective(), &mut state)
        })
    }

    /// Rescales so the effective matrix has spectral norm at most `bound`.
    pub fn renormalize(&mut self, bound: f64) -> Result<()> {
        match self {
            LinearWeight::Full { w, state, sigma } => {
                *sigma = SigmaCache::default();
                *w = normalize_to_bound(w, bound, state)?;
            }
            LinearWeight::LowRank {
                u,
                v,
                state,
                sigma: cache,
            } => {
                *cache = SigmaCache::default();
                if !(bound > 0.0) {
                    return Err(Error::InvalidParameter(format!(
                        "spectral bound must be positive, got {bound}"
                    )));
                }
                let sigma = spectral_norm_converged(&u.matmul_unchecked(&v.transpose()), state);
                if sigma > bound {
                    let s = (bound / sigma).sqrt();
                    *u = u.scale(s);
                    *v = v.scale(s);
                }
            }
        }
        Ok(())
    }

    /// Pushes the effective weight onto `tape` given its parameter leaves.
    pub(crate) fn on_tape(&self, tape: &mut Tape, vars: &[Var]) -> Var {
        match self {
            LinearWeight::Full { .. } => vars[0],
            LinearWeight::LowRank { .. } => {
                let vt = tape.transpose(vars[1]);
                tape.matmul(vars[0], vt)
            }
        }
    }
}

/// `h ↦ elu(Σ_c P_c·h·W_c + b)`; with no propagation matrices this is
/// `elu(h·W + b)` with a single weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weights: Vec<LinearWeight>,
    pub bias: Option<Matrix>,
}

impl DenseLayer {
    pub fn new<R: Rng + ?Sized>(
        d_in: usize,
        d_out: usize,
        channels: usize,
        rank: Option<usize>,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weights = (0..channels)
            .map(|_| match rank {
                Some(r) => LinearWeight::low_rank(d_in, d_out, r, rng),
                None => LinearWeight::full(d_in, d_out, rng),
            })
            .collect();
        Self {
            weights,
            bias: bias.then(|| Matrix::zeros(1, d_out)),
        }
    }

    pub fn param_count(&self) -> usize {
        self.weights
            .iter()
            .map(LinearWeight::param_count)
            .sum::<usize>()
            + self.bias.as_ref().map_or(0, Matrix::len)
    }

    pub fn params(&self) -> Vec<&Matrix> {
        let mut out: Vec<&Matrix> = self.weights.iter().flat_map(|w| w.params()).collect();
        out.extend(self.bias.as_ref());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = self
            .weights
            .iter_mut()
            .flat_map(|w| w.params_mut())
            .collect();
        out.extend(self.bias.as_mut());
        out
    }

    pub fn renormalize(&mut self, bound: f64) -> Result<()> {
        for w in &mut self.weights {
            w.renormalize(bound)?;
        }
        Ok(())
    }

    /// Sum of the channel weights' spectral norms.
    pub fn lipschitz_bound(&self) -> f64 {
        self.weights.iter().map(LinearWeight::sigma).sum()
    }
}
