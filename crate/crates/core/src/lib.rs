//! Graph residual flows for small molecular graphs.

pub mod autodiff;
pub mod chem;
pub mod error;
pub mod flow;
pub mod graph;
pub mod inversion;
pub mod latent;
pub mod likelihood;
pub mod linalg;
pub mod seed;
pub mod selfcheck;
pub mod train;

pub use error::{Error, Result};
