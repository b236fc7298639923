//! Spatiotemporal focal modulation networks for video classification.

// `!(x > 0.0)` style checks are meant to reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod backbone;
pub mod error;
pub mod exec;
pub mod focal;
pub mod graph;
pub mod io;
pub mod kernels;
pub mod layers;
pub mod params;
pub mod real;
pub mod tensor;
pub mod train;

pub use backbone::{Embedding, ModelConfig, Network, NetworkConfig};
pub use error::{Error, Result};
pub use focal::{DesignVariant, FocalConfig, FocalLayer, Fusion, MixerKind};
pub use graph::{Gradients, Graph, OpKind, Var};
pub use params::{Init, ParamId, ParamStore};
pub use real::Real;
pub use tensor::Tensor;

/// Generator used for every seeded draw in the crate.
pub type SeededRng = rand_chacha::ChaCha8Rng;
