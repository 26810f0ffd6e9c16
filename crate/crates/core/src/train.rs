//! Reverse-mode gradients of the negative log-likelihood, Adam with
//! spectral projection, and a resumable training loop.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::flow::{check_version, stack_on_tape, GrfModel, TapeBlock, CHECKPOINT_VERSION};
use crate::graph::{dequantize_with, MolGraph};
use crate::likelihood::{draw_probes, probe_seed, LogDetConfig, ProbeKind};
use crate::linalg::Matrix;
use crate::seed::{derive_seed, stream_rng};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Overrides the model's budget when set.
    pub lipschitz_budget: Option<f64>,
    pub series_terms: usize,
    pub hutchinson_samples: usize,
    pub probe: ProbeKind,
    pub rng_seed: u64,
    /// Epochs between checkpoints; 0 disables them.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl TrainConfig {
    pub fn toy() -> Self {
        Self {
            batch_size: 32,
            learning_rate: 1e-2,
            epochs: 20,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            lipschitz_budget: None,
            series_terms: 8,
            hutchinson_samples: 1,
            probe: ProbeKind::Rademacher,
            rng_seed: 0,
            checkpoint_every: 0,
        }
    }

    pub fn qm9() -> Self {
        Self {
            batch_size: 2048,
            learning_rate: 1e-3,
            epochs: 70,
            ..Self::toy()
        }
    }

    pub fn zinc() -> Self {
        Self {
            batch_size: 256,
            learning_rate: 1e-4,
            epochs: 70,
            ..Self::toy()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "toy" => Some(Self::toy()),
            "qm9" => Some(Self::qm9()),
            "zinc" => Some(Self::zinc()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.into()));
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || !(self.epsilon > 0.0)
        {
            return bad("adam needs betas in [0, 1) and a positive epsilon");
        }
        if let Some(b) = self.lipschitz_budget {
            if !(b > 0.0 && b < 1.0) {
                return bad("lipschitz_budget must lie in (0, 1)");
            }
        }
        self.logdet().validate()
    }

    pub fn logdet(&self) -> LogDetConfig {
        LogDetConfig {
            series_terms: self.series_terms,
            probes: self.hutchinson_samples,
            probe: self.probe,
            rng_seed: self.rng_seed,
        }
    }
}

/// Loss and gradients for one batch.
#[derive(Debug, Clone)]
pub struct BatchGradient {
    /// Mean negative log-likelihood.
    pub loss: f64,
    pub logdet_mean: f64,
    pub prior_mean: f64,
    /// Gradients of `loss`, shaped like [`GrfModel::params`].
    pub grads: Vec<Matrix>,
}

struct SampleGradient {
    logp: f64,
    logdet: f64,
    prior: f64,
    grads: Vec<Matrix>,
}

fn logdet_on_tape(tape: &mut Tape, block: &TapeBlock, probes: &[Matrix], terms: usize) -> Var {
    let mut acc: Option<Var> = None;
    let scale = 1.0 / probes.len() as f64;
    for p in probes {
        let v = tape.constant(p.clone());
        let mut w = v;
        for k in 1..=terms {
            w = block.jvp(tape, w);
            let d = tape.dot(v, w);
            let sign = if k % 2 == 1 { 1.0 } else { -1.0 };
            let term = tape.scale(d, sign * scale / k as f64);
            acc = Some(match acc {
                Some(a) => tape.add(a, term),
                None => term,
            });
        }
    }
    acc.expect("at least one probe")
}

fn sample_gradient(
    model: &GrfModel,
    g: &MolGraph,
    cfg: &LogDetConfig,
    sample_seed: u64,
) -> Result<SampleGradient> {
    let names = model.block_names();
    let mut rng = stream_rng(sample_seed, 0);
    let dq = dequantize_with(g, model.config.noise_scale, &mut rng)?;

    let mut tape = Tape::new();
    let params: Vec<Var> = model
        .params()
        .into_iter()
        .map(|m| tape.leaf(m.clone()))
        .collect();
    let mut cursor = 0;
    let mut logdets: Vec<Var> = Vec::new();

    let mut z = tape.constant(model.adjacency_to_rows(&dq.adjacency_c)?);
    for (i, b) in model.adjacency_blocks.iter().enumerate() {
        let n = b.stack.params().len();
        let (r, tb) = stack_on_tape(&b.stack, &mut tape, &params[cursor..cursor + n], z, None);
        cursor += n;
        let mut prng = stream_rng(probe_seed(cfg.rng_seed, sample_seed, i), 0);
        let probes = draw_probes(
            cfg.probe,
            (b.rows, b.stack.layers[0].weights[0].d_in()),
            cfg.probes,
            &mut prng,
        );
        logdets.push(logdet_on_tape(&mut tape, &tb, &probes, cfg.series_terms));
        z = tape.add(z, r);
    }

    let props: Vec<Matrix> = model.propagation(&g.adjacency);
    let offset = model.adjacency_blocks.len();
    let mut zx = tape.constant(dq.features_c.clone());
    for (i, b) in model.feature_blocks.iter().enumerate() {
        let n = b.stack.params().len();
        let pv: Vec<Var> = props.iter().map(|p| tape.constant(p.clone())).collect();
        let (r, tb) = stack_on_tape(
            &b.stack,
            &mut tape,
            &params[cursor..cursor + n],
            zx,
            Some(pv),
        );
        cursor += n;
        let mut prng = stream_rng(probe_seed(cfg.rng_seed, sample_seed, offset + i), 0);
        let shape = tape.value(zx).shape();
        let probes = draw_probes(cfg.probe, shape, cfg.probes, &mut prng);
        logdets.push(logdet_on_tape(&mut tape, &tb, &probes, cfg.series_terms));
        zx = tape.add(zx, r);
    }

    for (i, &l) in logdets.iter().enumerate() {
        if !tape.scalar(l).is_finite() {
            return Err(Error::NonFinite {
                layer: names[i].clone(),
            });
        }
    }

    let sa = tape.sum_squares(z);
    let sx = tape.sum_squares(zx);
    let ss = tape.add(sa, sx);
    let d = (tape.value(z).len() + tape.value(zx).len()) as f64;
    let prior_value = -0.5 * tape.scalar(ss) - HALF_LN_2PI * d;
    let mut objective = tape.scale(ss, 0.5);
    for &l in &logdets {
        objective = tape.sub(objective, l);
    }
    if !prior_value.is_finite() {
        return Err(Error::NonFinite {
            layer: "prior".into(),
        });
    }
    let logdet: f64 = logdets.iter().map(|&l| tape.scalar(l)).sum();
    let mut grads = tape.backward(objective);
    let model_params = model.params();
    let grads: Vec<Matrix> = params
        .iter()
        .zip(&model_params)
        .map(|(&v, m)| grads.take_or_zeros(v, m))
        .collect();
    Ok(SampleGradient {
        logp: prior_value + logdet,
        logdet,
        prior: prior_value,
        grads,
    })
}

/// Samples per parallel wave; partial sums are combined in a fixed order
/// so results do not depend on the thread count.
const WAVE: usize = 16;

/// `−mean log p` over `batch` and its parameter gradients. Sample `i` uses
/// seed `derive_seed(step_seed, i)` for dequantisation and probes.
pub fn grad_nll(
    model: &GrfModel,
    batch: &[MolGraph],
    cfg: &LogDetConfig,
    step_seed: u64,
) -> Result<BatchGradient> {
    if batch.is_empty() {
        return Err(Error::Empty("training batch"));
    }
    cfg.validate()?;
    let mut grads: Vec<Matrix> = model
        .params()
        .iter()
        .map(|m| Matrix::zeros(m.rows(), m.cols()))
        .collect();
    let (mut logp, mut logdet, mut prior) = (0.0, 0.0, 0.0);
    for (w, wave) in batch.chunks(WAVE).enumerate() {
        let results: Vec<Result<SampleGradient>> = wave
            .par_iter()
            .enumerate()
            .map(|(j, g)| {
                sample_gradient(model, g, cfg, derive_seed(step_seed, (w * WAVE + j) as u64))
            })
            .collect();
        for r in results {
            let s = r?;
            logp += s.logp;
            logdet += s.logdet;
            prior += s.prior;
            for (acc, g) in grads.iter_mut().zip(&s.grads) {
                acc.add_assign(g);
            }
        }
    }
    let n = batch.len() as f64;
    let names = model.block_names();
    let mut block_of_param = Vec::new();
    for (i, b) in model.adjacency_blocks.iter().enumerate() {
        block_of_param.extend(std::iter::repeat_n(i, b.stack.params().len()));
    }
    let offset = model.adjacency_blocks.len();
    for (i, b) in model.feature_blocks.iter().enumerate() {
        block_of_param.extend(std::iter::repeat_n(offset + i, b.stack.params().len()));
    }
    for (k, g) in grads.iter_mut().enumerate() {
        *g = g.scale(1.0 / n);
        if !g.is_finite() {
            return Err(Error::NonFinite {
                layer: format!("{} (gradient)", names[block_of_param[k]]),
            });
        }
    }
    Ok(BatchGradient {
        loss: -logp / n,
        logdet_mean: logdet / n,
        prior_mean: prior / n,
        grads,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &[&Matrix]) -> Self {
        let zeros: Vec<Matrix> = params
            .iter()
            .map(|p| Matrix::zeros(p.rows(), p.cols()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// Bias-corrected Adam update applied in place.
pub fn adam_update(
    params: &mut [&mut Matrix],
    grads: &[Matrix],
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::InvalidParameter(format!(
            "adam got {} parameters, {} gradients and {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (k, p) in params.iter_mut().enumerate() {
        let g = &grads[k];
        if g.shape() != p.shape() {
            return Err(Error::DimensionMismatch {
                op: "adam_update",
                left: p.shape(),
                right: g.shape(),
            });
        }
        let m = state.m[k].as_mut_slice();
        let v = state.v[k].as_mut_slice();
        for (((pi, &gi), mi), vi) in p.as_mut_slice().iter_mut().zip(g.as_slice()).zip(m).zip(v) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *pi -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
    Ok(())
}

/// Adam on every model parameter, then projection of every weight back
/// inside its spectral budget.
pub fn adam_step(
    model: &mut GrfModel,
    grads: &[Matrix],
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    adam_update(&mut model.params_mut(), grads, state, cfg)?;
    model.renormalize()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub step: u64,
    pub nll: f64,
    pub logdet_mean: f64,
    pub prior_mean: f64,
}

/// Plain mean of the per-step NLL within each epoch.
pub fn epoch_mean_nll(history: &[HistoryRow]) -> Vec<f64> {
    let Some(last) = history.last() else {
        return Vec::new();
    };
    let mut sums = vec![(0.0, 0usize); last.epoch + 1];
    for r in history {
        sums[r.epoch].0 += r.nll;
        sums[r.epoch].1 += 1;
    }
    sums.into_iter()
        .filter(|&(_, c)| c > 0)
        .map(|(s, c)| s / c as f64)
        .collect()
}

/// Everything needed to continue a run bit-identically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trainer {
    pub model: GrfModel,
    pub config: TrainConfig,
    pub adam: AdamState,
    pub epochs_completed: usize,
    pub global_step: u64,
    pub history: Vec<HistoryRow>,
}

#[derive(Serialize, Deserialize)]
struct TrainerFile {
    format_version: u32,
    trainer: Trainer,
}

impl Trainer {
    pub fn new(mut model: GrfModel, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if let Some(b) = config.lipschitz_budget {
            model.config.lipschitz_budget = b;
            for blk in &mut model.adjacency_blocks {
                blk.stack.lipschitz_budget = b;
            }
            for blk in &mut model.feature_blocks {
                blk.stack.lipschitz_budget = b;
            }
            model.renormalize()?;
        }
        let adam = AdamState::new(&model.params());
        Ok(Self {
            model,
            config,
            adam,
            epochs_completed: 0,
            global_step: 0,
            history: Vec::new(),
        })
    }

    /// One shuffled pass over `dataset`.
    pub fn run_epoch(&mut self, dataset: &[MolGraph]) -> Result<()> {
        if dataset.is_empty() {
            return Err(Error::Empty("training dataset"));
        }
        let epoch = self.epochs_completed;
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut stream_rng(
            derive_seed(self.config.rng_seed, 1),
            epoch as u64,
        ));
        let logdet = self.config.logdet();
        for idx in order.chunks(self.config.batch_size) {
            let batch: Vec<MolGraph> = idx.iter().map(|&i| dataset[i].clone()).collect();
            let step_seed = derive_seed(derive_seed(self.config.rng_seed, 2), self.global_step);
            let bg = grad_nll(&self.model, &batch, &logdet, step_seed)?;
            adam_step(&mut self.model, &bg.grads, &mut self.adam, &self.config)?;
            self.history.push(HistoryRow {
                epoch,
                step: self.global_step,
                nll: bg.loss,
                logdet_mean: bg.logdet_mean,
                prior_mean: bg.prior_mean,
            });
            self.global_step += 1;
        }
        self.epochs_completed += 1;
        Ok(())
    }

    /// Runs until `config.epochs` epochs are complete, calling `after_epoch`
    /// after each one.
    pub fn train<F>(&mut self, dataset: &[MolGraph], mut after_epoch: F) -> Result<()>
    where
        F: FnMut(&Trainer) -> Result<()>,
    {
        while self.epochs_completed < self.config.epochs {
            self.run_epoch(dataset)?;
            after_epoch(self)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(
            &mut w,
            &TrainerFile {
                format_version: CHECKPOINT_VERSION,
                trainer: self.clone(),
            },
        )?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: TrainerFile = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        check_version(file.format_version)?;
        Ok(file.trainer)
    }
}

/// Trains a fresh copy of `model` for `cfg.epochs` epochs.
pub fn train(
    model: GrfModel,
    dataset: &[MolGraph],
    cfg: &TrainConfig,
) -> Result<(GrfModel, Vec<HistoryRow>)> {
    let mut t = Trainer::new(model, cfg.clone())?;
    t.train(dataset, |_| Ok(()))?;
    Ok((t.model, t.history))
}
