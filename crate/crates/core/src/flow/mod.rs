//! Residual flow layers and the stacked model.

mod block;
mod layer;
mod model;

pub use crate::autodiff::elu;
pub(crate) use block::{stack_on_tape, TapeBlock};
pub use block::{GcnBlock, GcnMode, LayerStack, MlpBlock, PreparedBlock, ResidualMap};
pub use layer::{DenseLayer, LinearWeight, SigmaCache};
pub(crate) use model::check_version;
pub use model::{AdjacencyLayout, GrfModel, ModelConfig, CHECKPOINT_VERSION};
