//! Residual blocks `x ↦ x + R(x)` with `Lip(R) < 1`.
//!
//! Both block kinds are stacks of [`DenseLayer`]s acting on the rows of a
//! matrix. The GCN block multiplies by the normalised adjacency before every
//! weight; the MLP block does not.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layer::DenseLayer;
use crate::autodiff::{elu, elu_deriv, Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// A residual function together with its Jacobian-vector products.
pub trait ResidualMap: Sync {
    /// Shape of the input and output.
    fn shape(&self) -> (usize, usize);

    fn residual(&self, x: &Matrix) -> Matrix;

    /// `v ↦ J_R(x)·v` for a fixed `x`.
    fn linearize<'a>(&'a self, x: &Matrix) -> Box<dyn Fn(&Matrix) -> Matrix + Sync + 'a>;

    /// An upper bound on `Lip(R)`.
    fn lipschitz_bound(&self) -> f64;

    fn forward(&self, x: &Matrix) -> Matrix {
        x.add(&self.residual(x)).expect("residual keeps shape")
    }
}

/// How the GCN block sees bond types.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GcnMode {
    /// One `P` from all real bonds collapsed together.
    #[default]
    Collapsed,
    /// One `P_r` and one weight per real bond channel, summed.
    PerChannel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerStack {
    pub layers: Vec<DenseLayer>,
    pub lipschitz_budget: f64,
}

impl LayerStack {
    fn channels(&self) -> usize {
        self.layers.first().map_or(1, |l| l.weights.len())
    }

    /// Spectral bound applied to every individual weight.
    pub fn per_weight_bound(&self) -> f64 {
        self.lipschitz_budget.powf(1.0 / self.layers.len() as f64) / self.channels() as f64
    }

    pub fn renormalize(&mut self) -> Result<()> {
        let bound = self.per_weight_bound();
        for l in &mut self.layers {
            l.renormalize(bound)?;
        }
        Ok(())
    }

    pub fn lipschitz_bound(&self) -> f64 {
        self.layers
            .iter()
            .map(DenseLayer::lipschitz_bound)
            .product()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(DenseLayer::param_count).sum()
    }

    pub fn params(&self) -> Vec<&Matrix> {
        self.layers.iter().flat_map(DenseLayer::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        self.layers
            .iter_mut()
            .flat_map(DenseLayer::params_mut)
            .collect()
    }

    fn prepare(&self, props: Option<Vec<Matrix>>, rows: usize) -> PreparedBlock {
        let d = self.layers[0].weights[0].d_in();
        PreparedBlock {
            weights: self
                .layers
                .iter()
                .map(|l| l.weights.iter().map(|w| w.effective()).collect())
                .collect(),
            biases: self.layers.iter().map(|l| l.bias.clone()).collect(),
            props,
            shape: (rows, d),
            lipschitz: self.lipschitz_bound(),
        }
    }
}

/// Feature block `R_X(Z) = elu(P·Z·W)`, stacked when there are several layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GcnBlock {
    pub stack: LayerStack,
    pub mode: GcnMode,
}

impl GcnBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        m: usize,
        depth: usize,
        budget: f64,
        mode: GcnMode,
        bond_channels: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        check_budget(budget, depth)?;
        let channels = match mode {
            GcnMode::Collapsed => 1,
            GcnMode::PerChannel => bond_channels,
        };
        let layers = (0..depth)
            .map(|_| DenseLayer::new(m, m, channels, None, bias, rng))
            .collect();
        let mut block = Self {
            stack: LayerStack {
                layers,
                lipschitz_budget: budget,
            },
            mode,
        };
        block.stack.renormalize()?;
        Ok(block)
    }

    /// Binds the block to the propagation matrices of one graph.
    pub fn prepare(&self, props: &[Matrix]) -> Result<PreparedBlock> {
        let want = self.stack.channels();
        if props.len() != want {
            return Err(Error::InvalidParameter(format!(
                "GCN block expects {want} propagation matrices, got {}",
                props.len()
            )));
        }
        Ok(self.stack.prepare(Some(props.to_vec()), props[0].rows()))
    }
}

/// Adjacency block: an ELU MLP applied to each row of its input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpBlock {
    pub stack: LayerStack,
    /// Rows the block sees: 1 for the flattened tensor, N for node rows.
    pub rows: usize,
}

impl MlpBlock {
    pub fn new<R: Rng + ?Sized>(
        rows: usize,
        width: usize,
        depth: usize,
        budget: f64,
        rank: Option<usize>,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        check_budget(budget, depth)?;
        let layers = (0..depth)
            .map(|_| DenseLayer::new(width, width, 1, rank, bias, rng))
            .collect();
        let mut block = Self {
            stack: LayerStack {
                layers,
                lipschitz_budget: budget,
            },
            rows,
        };
        block.stack.renormalize()?;
        Ok(block)
    }

    pub fn prepare(&self) -> PreparedBlock {
        self.stack.prepare(None, self.rows)
    }
}

fn check_budget(budget: f64, depth: usize) -> Result<()> {
    if !(budget > 0.0 && budget < 1.0) || depth == 0 {
        return Err(Error::InvalidParameter(format!(
            "block needs 0 < budget < 1 and depth >= 1 (got {budget}, {depth})"
        )));
    }
    Ok(())
}

/// A block with its effective weights materialised and, for GCN blocks, its
/// propagation matrices bound.
#[derive(Debug, Clone)]
pub struct PreparedBlock {
    weights: Vec<Vec<Matrix>>,
    biases: Vec<Option<Matrix>>,
    props: Option<Vec<Matrix>>,
    shape: (usize, usize),
    lipschitz: f64,
}

impl PreparedBlock {
    fn linear(&self, layer: usize, h: &Matrix) -> Matrix {
        let ws = &self.weights[layer];
        match &self.props {
            None => h.matmul_unchecked(&ws[0]),
            Some(ps) => {
                let mut acc = ps[0].matmul_unchecked(h).matmul_unchecked(&ws[0]);
                for (p, w) in ps.iter().zip(ws).skip(1) {
                    acc.add_assign(&p.matmul_unchecked(h).matmul_unchecked(w));
                }
                acc
            }
        }
    }

    fn pre_activation(&self, layer: usize, h: &Matrix) -> Matrix {
        let pre = self.linear(layer, h);
        match &self.biases[layer] {
            Some(b) => pre.add_row_broadcast(b).expect("bias width"),
            None => pre,
        }
    }

    fn check(&self, x: &Matrix) {
        assert_eq!(x.shape(), self.shape, "residual block input shape");
    }
}

impl ResidualMap for PreparedBlock {
    fn shape(&self) -> (usize, usize) {
        self.shape
    }

    fn residual(&self, x: &Matrix) -> Matrix {
        self.check(x);
        let mut h = x.clone();
        for l in 0..self.weights.len() {
            h = self.pre_activation(l, &h).map(elu);
        }
        h
    }

    fn linearize<'a>(&'a self, x: &Matrix) -> Box<dyn Fn(&Matrix) -> Matrix + Sync + 'a> {
        self.check(x);
        let mut masks = Vec::with_capacity(self.weights.len());
        let mut h = x.clone();
        for l in 0..self.weights.len() {
            let pre = self.pre_activation(l, &h);
            masks.push(pre.map(elu_deriv));
            h = pre.map(elu);
        }
        Box::new(move |v: &Matrix| {
            let mut t = v.clone();
            for (l, mask) in masks.iter().enumerate() {
                t = self.linear(l, &t).zip_map(mask, |a, b| a * b);
            }
            t
        })
    }

    fn lipschitz_bound(&self) -> f64 {
        self.lipschitz
    }
}

/// A block's forward pass recorded on a tape, kept so Jacobian-vector
/// products can be recorded against the same activations.
pub(crate) struct TapeBlock {
    weights: Vec<Vec<Var>>,
    masks: Vec<Var>,
    props: Option<Vec<Var>>,
}

impl TapeBlock {
    fn linear(&self, tape: &mut Tape, layer: usize, h: Var) -> Var {
        let ws = &self.weights[layer];
        match &self.props {
            None => tape.matmul(h, ws[0]),
            Some(ps) => {
                let mut acc: Option<Var> = None;
                for (&p, &w) in ps.iter().zip(ws) {
                    let ph = tape.matmul(p, h);
                    let term = tape.matmul(ph, w);
                    acc = Some(match acc {
                        Some(a) => tape.add(a, term),
                        None => term,
                    });
                }
                acc.expect("at least one channel")
            }
        }
    }

    /// `J_R(x)·v` on the tape.
    pub(crate) fn jvp(&self, tape: &mut Tape, v: Var) -> Var {
        let mut t = v;
        for l in 0..self.masks.len() {
            let lin = self.linear(tape, l, t);
            t = tape.mul(lin, self.masks[l]);
        }
        t
    }
}

/// Records `R(x)` for `stack` on `tape`. `params` are the leaves for
/// `stack.params()` in order. Returns the residual and the recorded block.
pub(crate) fn stack_on_tape(
    stack: &LayerStack,
    tape: &mut Tape,
    params: &[Var],
    x: Var,
    props: Option<Vec<Var>>,
) -> (Var, TapeBlock) {
    let mut cursor = 0;
    let mut weights = Vec::with_capacity(stack.layers.len());
    let mut biases = Vec::with_capacity(stack.layers.len());
    for layer in &stack.layers {
        let mut ws = Vec::with_capacity(layer.weights.len());
        for w in &layer.weights {
            let n = w.params().len();
            ws.push(w.on_tape(tape, &params[cursor..cursor + n]));
            cursor += n;
        }
        weights.push(ws);
        biases.push(layer.bias.as_ref().map(|_| {
            cursor += 1;
            params[cursor - 1]
        }));
    }
    debug_assert_eq!(cursor, params.len());
    let mut block = TapeBlock {
        weights,
        masks: Vec::new(),
        props,
    };
    let mut h = x;
    for (l, bias) in biases.iter().enumerate() {
        let mut pre = block.linear(tape, l, h);
        if let Some(b) = bias {
            pre = tape.add_row(pre, *b);
        }
        block.masks.push(tape.elu_deriv(pre));
        h = tape.elu(pre);
    }
    (h, block)
}
