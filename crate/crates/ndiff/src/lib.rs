//! Minimal reverse-mode differentiable tensor engine.
//!
//! Values live in [`Tensor`]s; computations are recorded on a [`Graph`] and
//! differentiated with [`Graph::backward`]. Trainable tensors are kept in a
//! [`ParamStore`] outside the graph so a fresh tape can be built each step.

pub mod attention;
pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod params;
pub mod tensor;

pub use attention::{
    causal_mask, key_mask, linear, multi_head_attention, multi_head_attention_with_weights,
    sinusoidal_positions, AttentionParams,
};
pub use error::{NdError, Result};
pub use gradcheck::{finite_diff_check, finite_diff_report, primitive_suite, GradCheckReport, SuiteResult};
pub use graph::{Graph, GraphOptions, Padding, Var};
pub use params::{GradientMap, ParamId, ParamStore};
pub use tensor::{Precision, Tensor};
