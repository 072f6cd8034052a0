//! Parameterized building blocks.
//!
//! Layers own no tensors. They hold [`ParamId`] handles into a
//! [`ParamRegistry`], which the optimizer updates between steps.

mod attention;
mod layers;
mod registry;

pub use attention::{MultiHeadAttention, TransformerBlock};
pub use layers::{linear, Conv2d, LayerNorm, Linear, LAYER_NORM_EPS};
pub use registry::{Param, ParamBuilder, ParamId, ParamRegistry};
