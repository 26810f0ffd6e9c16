//! The full model: adjacency MLP blocks followed by feature GCN blocks.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::block::{GcnBlock, GcnMode, MlpBlock, PreparedBlock, ResidualMap};
use crate::chem::Element;
use crate::error::{Error, Result};
use crate::graph::{
    augmented_normalized_adjacency_of, per_channel_normalized_adjacency, DequantGraph, GraphSpec,
    LatentPoint,
};
use crate::linalg::{Matrix, Tensor3};

/// How the adjacency MLP sees the `N×N×R` tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AdjacencyLayout {
    /// One vector of length `N·N·R`.
    #[default]
    Flattened,
    /// `N` rows of length `N·R` sharing one MLP.
    NodeRows,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub graph: GraphSpec,
    pub gcn_blocks: usize,
    pub gcn_layers: usize,
    pub mlp_blocks: usize,
    pub mlp_layers: usize,
    pub lipschitz_budget: f64,
    pub noise_scale: f64,
    pub adjacency_layout: AdjacencyLayout,
    pub gcn_mode: GcnMode,
    /// Rank of factored adjacency weights; `None` keeps them dense.
    pub adjacency_rank: Option<usize>,
    pub feature_bias: bool,
    pub adjacency_bias: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl ModelConfig {
    /// Desk-scale profile.
    pub fn toy() -> Self {
        Self {
            graph: GraphSpec::qm9(9),
            gcn_blocks: 1,
            gcn_layers: 1,
            mlp_blocks: 4,
            mlp_layers: 2,
            lipschitz_budget: 0.9,
            noise_scale: 0.9,
            adjacency_layout: AdjacencyLayout::Flattened,
            gcn_mode: GcnMode::Collapsed,
            adjacency_rank: None,
            feature_bias: false,
            adjacency_bias: true,
        }
    }

    pub fn qm9() -> Self {
        Self {
            gcn_blocks: 1,
            gcn_layers: 1,
            mlp_blocks: 32,
            mlp_layers: 25,
            adjacency_layout: AdjacencyLayout::NodeRows,
            ..Self::toy()
        }
    }

    pub fn zinc() -> Self {
        use Element::*;
        Self {
            graph: GraphSpec {
                n_max: 38,
                atom_types: vec![C, N, O, F, P, S, Cl, Br, I],
                n_bond_types: 4,
            },
            gcn_blocks: 3,
            gcn_layers: 3,
            mlp_blocks: 3,
            mlp_layers: 3,
            adjacency_rank: Some(8),
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
        let g = &self.graph;
        GraphSpec::new(g.n_max, g.atom_types.clone(), g.n_bond_types)?;
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if !(self.lipschitz_budget > 0.0 && self.lipschitz_budget < 1.0) {
            return bad(format!(
                "lipschitz_budget must lie in (0, 1), got {}",
                self.lipschitz_budget
            ));
        }
        if !(self.noise_scale > 0.0 && self.noise_scale < 1.0) {
            return bad(format!(
                "noise_scale must lie in (0, 1), got {}",
                self.noise_scale
            ));
        }
        if (self.gcn_blocks > 0 && self.gcn_layers == 0)
            || (self.mlp_blocks > 0 && self.mlp_layers == 0)
        {
            return bad("blocks need at least one layer".into());
        }
        if self.adjacency_rank == Some(0) {
            return bad("adjacency_rank must be at least 1".into());
        }
        Ok(())
    }

    /// Rows the adjacency MLP sees.
    pub fn adjacency_rows(&self) -> usize {
        match self.adjacency_layout {
            AdjacencyLayout::Flattened => 1,
            AdjacencyLayout::NodeRows => self.graph.n_max,
        }
    }

    pub fn adjacency_width(&self) -> usize {
        self.graph.adjacency_len() / self.adjacency_rows()
    }

    fn gcn_channels(&self) -> usize {
        match self.gcn_mode {
            GcnMode::Collapsed => 1,
            GcnMode::PerChannel => self.graph.n_bond_types - 1,
        }
    }

    /// Trainable scalar count implied by the configuration, without
    /// allocating any weights.
    pub fn parameter_count(&self) -> usize {
        let w = self.adjacency_width();
        let weight = match self.adjacency_rank {
            Some(r) => 2 * w * r,
            None => w * w,
        };
        let mlp_layer = weight + if self.adjacency_bias { w } else { 0 };
        let m = self.graph.n_atom_types();
        let gcn_layer = self.gcn_channels() * m * m + if self.feature_bias { m } else { 0 };
        self.mlp_blocks * self.mlp_layers * mlp_layer
            + self.gcn_blocks * self.gcn_layers * gcn_layer
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrfModel {
    pub config: ModelConfig,
    pub adjacency_blocks: Vec<MlpBlock>,
    pub feature_blocks: Vec<GcnBlock>,
}

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format_version: u32,
    model: GrfModel,
}

impl GrfModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let adjacency_blocks = (0..config.mlp_blocks)
            .map(|_| {
                MlpBlock::new(
                    config.adjacency_rows(),
                    config.adjacency_width(),
                    config.mlp_layers,
                    config.lipschitz_budget,
                    config.adjacency_rank,
                    config.adjacency_bias,
                    &mut rng,
                )
            })
            .collect::<Result<_>>()?;
        let feature_blocks = (0..config.gcn_blocks)
            .map(|_| {
                GcnBlock::new(
                    config.graph.n_atom_types(),
                    config.gcn_layers,
                    config.lipschitz_budget,
                    config.gcn_mode,
                    config.graph.n_bond_types - 1,
                    config.feature_bias,
                    &mut rng,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            config,
            adjacency_blocks,
            feature_blocks,
        })
    }

    pub fn spec(&self) -> &GraphSpec {
        &self.config.graph
    }

    pub fn count_parameters(&self) -> usize {
        self.adjacency_blocks
            .iter()
            .map(|b| b.stack.param_count())
            .sum::<usize>()
            + self
                .feature_blocks
                .iter()
                .map(|b| b.stack.param_count())
                .sum::<usize>()
    }

    /// Adjacency block parameters, then feature block parameters.
    pub fn params(&self) -> Vec<&Matrix> {
        let mut out: Vec<&Matrix> = self
            .adjacency_blocks
            .iter()
            .flat_map(|b| b.stack.params())
            .collect();
        out.extend(self.feature_blocks.iter().flat_map(|b| b.stack.params()));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = self
            .adjacency_blocks
            .iter_mut()
            .flat_map(|b| b.stack.params_mut())
            .collect();
        out.extend(
            self.feature_blocks
                .iter_mut()
                .flat_map(|b| b.stack.params_mut()),
        );
        out
    }

    /// Projects every weight back inside its spectral budget.
    pub fn renormalize(&mut self) -> Result<()> {
        for b in &mut self.adjacency_blocks {
            b.stack.renormalize()?;
        }
        for b in &mut self.feature_blocks {
            b.stack.renormalize()?;
        }
        Ok(())
    }

    /// Human-readable block names in parameter order.
    pub fn block_names(&self) -> Vec<String> {
        let mut names: Vec<String> = (0..self.adjacency_blocks.len())
            .map(|i| format!("adjacency block {i}"))
            .collect();
        names.extend((0..self.feature_blocks.len()).map(|i| format!("feature block {i}")));
        names
    }

    pub fn adjacency_to_rows(&self, a: &Tensor3) -> Result<Matrix> {
        if a.dims() != self.spec().adjacency_dims() {
            return Err(Error::DimensionMismatch {
                op: "adjacency_to_rows",
                left: (a.dims().0, a.dims().1 * a.dims().2),
                right: (
                    self.spec().n_max,
                    self.spec().n_max * self.spec().n_bond_types,
                ),
            });
        }
        a.to_matrix(self.config.adjacency_rows(), self.config.adjacency_width())
    }

    pub fn rows_to_adjacency(&self, m: Matrix) -> Result<Tensor3> {
        Tensor3::from_matrix(m, self.spec().adjacency_dims())
    }

    /// Propagation matrices for the feature blocks, from a discrete adjacency.
    pub fn propagation(&self, adjacency: &Tensor3) -> Vec<Matrix> {
        match self.config.gcn_mode {
            GcnMode::Collapsed => vec![augmented_normalized_adjacency_of(adjacency)],
            GcnMode::PerChannel => per_channel_normalized_adjacency(adjacency),
        }
    }

    pub fn prepared_adjacency_blocks(&self) -> Vec<PreparedBlock> {
        self.adjacency_blocks
            .iter()
            .map(MlpBlock::prepare)
            .collect()
    }

    pub fn prepared_feature_blocks(&self, adjacency: &Tensor3) -> Result<Vec<PreparedBlock>> {
        let props = self.propagation(adjacency);
        self.feature_blocks
            .iter()
            .map(|b| b.prepare(&props))
            .collect()
    }

    /// `z_A` from a dequantised adjacency tensor.
    pub fn adjacency_flow_forward(&self, a: &Tensor3) -> Result<Tensor3> {
        let mut z = self.adjacency_to_rows(a)?;
        for b in self.prepared_adjacency_blocks() {
            z = b.forward(&z);
        }
        self.rows_to_adjacency(z)
    }

    /// `z_X` from dequantised features, conditioned on a discrete adjacency.
    pub fn feature_flow_forward(&self, x: &Matrix, adjacency: &Tensor3) -> Result<Matrix> {
        let spec = self.spec();
        if x.shape() != (spec.n_max, spec.n_atom_types()) {
            return Err(Error::DimensionMismatch {
                op: "feature_flow_forward",
                left: x.shape(),
                right: (spec.n_max, spec.n_atom_types()),
            });
        }
        let mut z = x.clone();
        for b in self.prepared_feature_blocks(adjacency)? {
            z = b.forward(&z);
        }
        Ok(z)
    }

    /// Both flows. `adjacency` is the discrete tensor used for conditioning.
    pub fn forward(&self, dq: &DequantGraph, adjacency: &Tensor3) -> Result<LatentPoint> {
        Ok(LatentPoint {
            z_adjacency: self.adjacency_flow_forward(&dq.adjacency_c)?,
            z_features: self.feature_flow_forward(&dq.features_c, adjacency)?,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&ModelFile {
            format_version: CHECKPOINT_VERSION,
            model: self.clone(),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text)?;
        check_version(file.format_version)?;
        file.model.config.validate()?;
        Ok(file.model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(
            &mut w,
            &ModelFile {
                format_version: CHECKPOINT_VERSION,
                model: self.clone(),
            },
        )?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: ModelFile = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        check_version(file.format_version)?;
        file.model.config.validate()?;
        Ok(file.model)
    }
}

pub(crate) fn check_version(v: u32) -> Result<()> {
    if v != CHECKPOINT_VERSION {
        return Err(Error::Data(format!(
            "unsupported checkpoint format version {v} (expected {CHECKPOINT_VERSION})"
        )));
    }
    Ok(())
}
